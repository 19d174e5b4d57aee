//! A small arithmetic expression language for coefficient fields.
//!
//! Supported syntax: numbers, `+ - * / ^`, parentheses, the variables
//! `x1..x3`, `xi1..xi3`, `eta1..eta3`, `r` (Euclidean |x|), `pi`, the
//! functions `exp sin cos sqrt abs log tanh bump max min`, and the dot
//! products `dot(a, b)` with `a`, `b` among `x`, `xi`, `eta`.
//! `bump(t)` is the profile `(1 - t^2)^3` on `|t| < 1` and zero elsewhere.

use crate::error::{Error, Result};

/// Variable values an expression can read.
#[derive(Clone, Copy, Debug, Default)]
pub struct Vars {
    pub x: [f64; 3],
    pub xi: [f64; 3],
    pub eta: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Slot {
    X,
    Xi,
    Eta,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Op {
    Const(f64),
    Var(Slot, usize),
    Radius,
    Dot(Slot, Slot),
    Neg,
    Add,
    Sub,
    Mul,
    Div,
    Pow,
    Exp,
    Sin,
    Cos,
    Sqrt,
    Abs,
    Log,
    Tanh,
    Bump,
    Max,
    Min,
}

const STACK: usize = 64;

/// Compiled expression in postfix form.
#[derive(Clone, Debug)]
pub struct Expr {
    ops: Vec<Op>,
    source: String,
}

impl Expr {
    pub fn parse(src: &str) -> Result<Self> {
        let tokens = lex(src)?;
        let mut p = Parser { toks: &tokens, pos: 0, end: src.len(), ops: Vec::new() };
        p.expr()?;
        if p.pos != tokens.len() {
            return Err(Error::Expr { pos: tokens[p.pos].1, msg: "unexpected trailing input".into() });
        }
        let ops = fold_constants(p.ops);
        let mut depth = 0usize;
        let mut max_depth = 0usize;
        for op in &ops {
            depth = depth + 1 - arity(op);
            max_depth = max_depth.max(depth);
        }
        if max_depth > STACK {
            return Err(Error::Expr { pos: 0, msg: "expression nests too deeply".into() });
        }
        Ok(Expr { ops, source: src.to_string() })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Constant value when the expression reads no variables.
    pub fn as_constant(&self) -> Option<f64> {
        match self.ops.as_slice() {
            [Op::Const(c)] => Some(*c),
            _ => None,
        }
    }

    pub fn uses_xi(&self) -> bool {
        self.ops.iter().any(|op| match op {
            Op::Var(Slot::Xi, _) => true,
            Op::Dot(a, b) => *a == Slot::Xi || *b == Slot::Xi,
            _ => false,
        })
    }

    pub fn uses_eta(&self) -> bool {
        self.ops.iter().any(|op| match op {
            Op::Var(Slot::Eta, _) => true,
            Op::Dot(a, b) => *a == Slot::Eta || *b == Slot::Eta,
            _ => false,
        })
    }

    pub fn eval(&self, v: &Vars) -> f64 {
        let mut st = [0.0f64; STACK];
        let mut sp = 0usize;
        for op in &self.ops {
            match *op {
                Op::Const(c) => {
                    st[sp] = c;
                    sp += 1;
                }
                Op::Var(s, i) => {
                    st[sp] = slot(v, s)[i];
                    sp += 1;
                }
                Op::Radius => {
                    st[sp] = (v.x[0] * v.x[0] + v.x[1] * v.x[1] + v.x[2] * v.x[2]).sqrt();
                    sp += 1;
                }
                Op::Dot(a, b) => {
                    let (a, b) = (slot(v, a), slot(v, b));
                    st[sp] = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
                    sp += 1;
                }
                Op::Neg => st[sp - 1] = -st[sp - 1],
                Op::Exp => st[sp - 1] = st[sp - 1].exp(),
                Op::Sin => st[sp - 1] = st[sp - 1].sin(),
                Op::Cos => st[sp - 1] = st[sp - 1].cos(),
                Op::Sqrt => st[sp - 1] = st[sp - 1].sqrt(),
                Op::Abs => st[sp - 1] = st[sp - 1].abs(),
                Op::Log => st[sp - 1] = st[sp - 1].ln(),
                Op::Tanh => st[sp - 1] = st[sp - 1].tanh(),
                Op::Bump => st[sp - 1] = bump(st[sp - 1]),
                _ => {
                    sp -= 1;
                    let (a, b) = (st[sp - 1], st[sp]);
                    st[sp - 1] = binary(*op, a, b);
                }
            }
        }
        st[0]
    }
}

/// The compactly supported profile `(1 - t²)³`.
pub fn bump(t: f64) -> f64 {
    if t.abs() >= 1.0 {
        0.0
    } else {
        let s = 1.0 - t * t;
        s * s * s
    }
}

fn slot(v: &Vars, s: Slot) -> &[f64; 3] {
    match s {
        Slot::X => &v.x,
        Slot::Xi => &v.xi,
        Slot::Eta => &v.eta,
    }
}

fn binary(op: Op, a: f64, b: f64) -> f64 {
    match op {
        Op::Add => a + b,
        Op::Sub => a - b,
        Op::Mul => a * b,
        Op::Div => a / b,
        Op::Pow => {
            if b == b.round() && b.abs() < 64.0 {
                a.powi(b as i32)
            } else {
                a.powf(b)
            }
        }
        Op::Max => a.max(b),
        Op::Min => a.min(b),
        _ => unreachable!("not a binary operator"),
    }
}

fn arity(op: &Op) -> usize {
    match op {
        Op::Const(_) | Op::Var(..) | Op::Radius | Op::Dot(..) => 0,
        Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Pow | Op::Max | Op::Min => 2,
        _ => 1,
    }
}

fn fold_constants(ops: Vec<Op>) -> Vec<Op> {
    let mut out: Vec<Op> = Vec::with_capacity(ops.len());
    for op in ops {
        let n = arity(&op);
        let foldable = n > 0
            && out.len() >= n
            && out[out.len() - n..].iter().all(|o| matches!(o, Op::Const(_)));
        if !foldable {
            out.push(op);
            continue;
        }
        let mut tmp = Expr { ops: out[out.len() - n..].to_vec(), source: String::new() };
        tmp.ops.push(op);
        let value = tmp.eval(&Vars::default());
        out.truncate(out.len() - n);
        out.push(Op::Const(value));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Sym(char),
}

fn lex(src: &str) -> Result<Vec<(Tok, usize)>> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text: String = chars[start..i].iter().collect();
            let v = text
                .parse::<f64>()
                .map_err(|_| Error::Expr { pos: start, msg: format!("bad number '{text}'") })?;
            out.push((Tok::Num(v), start));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push((Tok::Ident(chars[start..i].iter().collect()), start));
        } else if "+-*/^(),".contains(c) {
            out.push((Tok::Sym(c), i));
            i += 1;
        } else {
            return Err(Error::Expr { pos: i, msg: format!("unexpected character '{c}'") });
        }
    }
    Ok(out)
}

struct Parser<'a> {
    toks: &'a [(Tok, usize)],
    pos: usize,
    end: usize,
    ops: Vec<Op>,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.0)
    }

    fn here(&self) -> usize {
        self.toks.get(self.pos).map(|t| t.1).unwrap_or(self.end)
    }

    fn err<T>(&self, msg: &str) -> Result<T> {
        Err(Error::Expr { pos: self.here(), msg: msg.into() })
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(&Tok::Sym(c)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<()> {
        if self.eat(c) {
            Ok(())
        } else {
            self.err(&format!("expected '{c}'"))
        }
    }

    fn expr(&mut self) -> Result<()> {
        self.term()?;
        loop {
            if self.eat('+') {
                self.term()?;
                self.ops.push(Op::Add);
            } else if self.eat('-') {
                self.term()?;
                self.ops.push(Op::Sub);
            } else {
                return Ok(());
            }
        }
    }

    fn term(&mut self) -> Result<()> {
        self.unary()?;
        loop {
            if self.eat('*') {
                self.unary()?;
                self.ops.push(Op::Mul);
            } else if self.eat('/') {
                self.unary()?;
                self.ops.push(Op::Div);
            } else {
                return Ok(());
            }
        }
    }

    fn unary(&mut self) -> Result<()> {
        if self.eat('-') {
            self.unary()?;
            self.ops.push(Op::Neg);
            Ok(())
        } else if self.eat('+') {
            self.unary()
        } else {
            self.power()
        }
    }

    fn power(&mut self) -> Result<()> {
        self.atom()?;
        if self.eat('^') {
            self.unary()?;
            self.ops.push(Op::Pow);
        }
        Ok(())
    }

    fn atom(&mut self) -> Result<()> {
        let tok = match self.peek() {
            Some(t) => t.clone(),
            None => return self.err("unexpected end of expression"),
        };
        self.pos += 1;
        match tok {
            Tok::Num(v) => {
                self.ops.push(Op::Const(v));
                Ok(())
            }
            Tok::Sym('(') => {
                self.expr()?;
                self.expect(')')
            }
            Tok::Ident(name) => {
                if self.peek() == Some(&Tok::Sym('(')) {
                    self.pos += 1;
                    self.call(&name)
                } else {
                    self.variable(&name)
                }
            }
            Tok::Sym(c) => {
                self.pos -= 1;
                self.err(&format!("unexpected '{c}'"))
            }
        }
    }

    fn variable(&mut self, name: &str) -> Result<()> {
        let op = match name {
            "pi" => Op::Const(std::f64::consts::PI),
            "r" => Op::Radius,
            _ => {
                let (slot, idx) = if let Some(rest) = name.strip_prefix("eta") {
                    (Slot::Eta, rest)
                } else if let Some(rest) = name.strip_prefix("xi") {
                    (Slot::Xi, rest)
                } else if let Some(rest) = name.strip_prefix('x') {
                    (Slot::X, rest)
                } else {
                    self.pos -= 1;
                    return self.err(&format!("unknown variable '{name}'"));
                };
                match idx {
                    "1" => Op::Var(slot, 0),
                    "2" => Op::Var(slot, 1),
                    "3" => Op::Var(slot, 2),
                    _ => {
                        self.pos -= 1;
                        return self.err(&format!("unknown variable '{name}'"));
                    }
                }
            }
        };
        self.ops.push(op);
        Ok(())
    }

    fn slot_name(&mut self) -> Result<Slot> {
        let s = match self.peek() {
            Some(Tok::Ident(n)) if n == "x" => Slot::X,
            Some(Tok::Ident(n)) if n == "xi" => Slot::Xi,
            Some(Tok::Ident(n)) if n == "eta" => Slot::Eta,
            _ => return self.err("dot() takes two of x, xi, eta"),
        };
        self.pos += 1;
        Ok(s)
    }

    fn call(&mut self, name: &str) -> Result<()> {
        if name == "dot" {
            let a = self.slot_name()?;
            self.expect(',')?;
            let b = self.slot_name()?;
            self.expect(')')?;
            self.ops.push(Op::Dot(a, b));
            return Ok(());
        }
        let (op, n) = match name {
            "exp" => (Op::Exp, 1),
            "sin" => (Op::Sin, 1),
            "cos" => (Op::Cos, 1),
            "sqrt" => (Op::Sqrt, 1),
            "abs" => (Op::Abs, 1),
            "log" => (Op::Log, 1),
            "tanh" => (Op::Tanh, 1),
            "bump" => (Op::Bump, 1),
            "max" => (Op::Max, 2),
            "min" => (Op::Min, 2),
            _ => return self.err(&format!("unknown function '{name}'")),
        };
        self.expr()?;
        for _ in 1..n {
            self.expect(',')?;
            self.expr()?;
        }
        self.expect(')')?;
        self.ops.push(op);
        Ok(())
    }
}
