//! Minimal ordered JSON writer with fixed float formatting.
//!
//! Floats are written with 17 significant digits in exponent form so that
//! reports are bit-reproducible and round-trip to the same `f64`.

use std::fmt::Write;

#[derive(Clone, Debug)]
pub enum Json {
    Null,
    Bool(bool),
    Int(i64),
    Num(f64),
    Str(String),
    Arr(Vec<Json>),
    Obj(Vec<(String, Json)>),
}

pub fn float(v: f64) -> String {
    format!("{v:.16e}")
}

impl Json {
    pub fn obj() -> Self {
        Json::Obj(Vec::new())
    }

    /// Append a field to an object; panics on other variants.
    pub fn field(mut self, key: &str, v: impl Into<Json>) -> Self {
        self.push(key, v);
        self
    }

    pub fn push(&mut self, key: &str, v: impl Into<Json>) {
        match self {
            Json::Obj(f) => f.push((key.to_string(), v.into())),
            _ => panic!("field on a non-object"),
        }
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        self.write(&mut s, 0);
        s.push('\n');
        s
    }

    fn write(&self, s: &mut String, indent: usize) {
        match self {
            Json::Null => s.push_str("null"),
            Json::Bool(b) => s.push_str(if *b { "true" } else { "false" }),
            Json::Int(i) => {
                let _ = write!(s, "{i}");
            }
            Json::Num(v) => {
                if v.is_finite() {
                    s.push_str(&float(*v));
                } else {
                    s.push_str("null");
                }
            }
            Json::Str(t) => escape(s, t),
            Json::Arr(items) => {
                if items.is_empty() {
                    s.push_str("[]");
                    return;
                }
                let flat = items.iter().all(|i| matches!(i, Json::Num(_) | Json::Int(_) | Json::Bool(_) | Json::Null));
                s.push('[');
                for (k, item) in items.iter().enumerate() {
                    if k > 0 {
                        s.push(',');
                    }
                    if flat {
                        if k > 0 {
                            s.push(' ');
                        }
                    } else {
                        newline(s, indent + 1);
                    }
                    item.write(s, indent + 1);
                }
                if !flat {
                    newline(s, indent);
                }
                s.push(']');
            }
            Json::Obj(fields) => {
                if fields.is_empty() {
                    s.push_str("{}");
                    return;
                }
                s.push('{');
                for (k, (key, v)) in fields.iter().enumerate() {
                    if k > 0 {
                        s.push(',');
                    }
                    newline(s, indent + 1);
                    escape(s, key);
                    s.push_str(": ");
                    v.write(s, indent + 1);
                }
                newline(s, indent);
                s.push('}');
            }
        }
    }
}

fn newline(s: &mut String, indent: usize) {
    s.push('\n');
    for _ in 0..indent {
        s.push_str("  ");
    }
}

fn escape(s: &mut String, t: &str) {
    s.push('"');
    for c in t.chars() {
        match c {
            '"' => s.push_str("\\\""),
            '\\' => s.push_str("\\\\"),
            '\n' => s.push_str("\\n"),
            '\r' => s.push_str("\\r"),
            '\t' => s.push_str("\\t"),
            c if (c as u32) < 0x20 => {
                let _ = write!(s, "\\u{:04x}", c as u32);
            }
            c => s.push(c),
        }
    }
    s.push('"');
}

impl From<f64> for Json {
    fn from(v: f64) -> Self {
        Json::Num(v)
    }
}

impl From<usize> for Json {
    fn from(v: usize) -> Self {
        Json::Int(v as i64)
    }
}

impl From<u64> for Json {
    fn from(v: u64) -> Self {
        Json::Int(v as i64)
    }
}

impl From<u32> for Json {
    fn from(v: u32) -> Self {
        Json::Int(v as i64)
    }
}

impl From<bool> for Json {
    fn from(v: bool) -> Self {
        Json::Bool(v)
    }
}

impl From<&str> for Json {
    fn from(v: &str) -> Self {
        Json::Str(v.to_string())
    }
}

impl From<String> for Json {
    fn from(v: String) -> Self {
        Json::Str(v)
    }
}

impl<T: Into<Json>> From<Option<T>> for Json {
    fn from(v: Option<T>) -> Self {
        v.map_or(Json::Null, Into::into)
    }
}

impl<T: Into<Json> + Clone> From<&[T]> for Json {
    fn from(v: &[T]) -> Self {
        Json::Arr(v.iter().cloned().map(Into::into).collect())
    }
}

impl<T: Into<Json>> From<Vec<T>> for Json {
    fn from(v: Vec<T>) -> Self {
        Json::Arr(v.into_iter().map(Into::into).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_with_seventeen_digits() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, f64::MIN_POSITIVE] {
            let s = float(v);
            assert_eq!(s.parse::<f64>().unwrap(), v);
        }
        assert_eq!(float(0.1), "1.0000000000000001e-1");
    }

    #[test]
    fn objects_keep_insertion_order() {
        let j = Json::obj().field("b", 1usize).field("a", "x\"y").field("n", f64::NAN).field("v", vec![1.0, 2.0]);
        let s = j.render();
        assert!(s.find("\"b\"").unwrap() < s.find("\"a\"").unwrap());
        assert!(s.contains("\"x\\\"y\""));
        assert!(s.contains("\"n\": null"));
        assert!(s.contains("[1.0000000000000000e0, 2.0000000000000000e0]"));
    }
}
