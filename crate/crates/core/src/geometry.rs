//! Simple magnetic systems on the unit ball and their geodesic flow.
//!
//! The metric is conformally flat, `g = c(x) δ`, and the magnetic form is a
//! scalar `b` in the plane or an exact form `dm` (or a uniform field) in
//! space. Trajectories obey `∇_γ̇ γ̇ = Y(γ̇)` at unit speed and are integrated
//! with fixed-step RK4 in `(x, ξ)`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type Vec3 = nalgebra::Vector3<f64>;

type FieldFn = Arc<dyn Fn(&Vec3) -> f64 + Send + Sync>;

const FD_STEP: f64 = 1e-5;
const BOUNDARY_EPS: f64 = 1e-10;

/// A scalar function on the chart, either constant or a callback.
#[derive(Clone)]
pub struct ScalarField {
    f: Option<FieldFn>,
    constant: f64,
}

impl std::fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.f {
            None => write!(f, "ScalarField::Constant({})", self.constant),
            Some(_) => write!(f, "ScalarField::Fn"),
        }
    }
}

impl ScalarField {
    pub fn constant(c: f64) -> Self {
        ScalarField { f: None, constant: c }
    }

    pub fn from_fn(f: impl Fn(&Vec3) -> f64 + Send + Sync + 'static) -> Self {
        ScalarField { f: Some(Arc::new(f)), constant: 0.0 }
    }

    pub fn is_constant(&self) -> bool {
        self.f.is_none()
    }

    #[inline]
    pub fn eval(&self, x: &Vec3) -> f64 {
        match &self.f {
            None => self.constant,
            Some(f) => f(x),
        }
    }

    /// Central-difference gradient in the first `dim` coordinates.
    pub fn gradient(&self, x: &Vec3, dim: usize) -> Vec3 {
        let mut g = Vec3::zeros();
        if self.f.is_none() {
            return g;
        }
        for i in 0..dim {
            let mut xp = *x;
            let mut xm = *x;
            xp[i] += FD_STEP;
            xm[i] -= FD_STEP;
            g[i] = (self.eval(&xp) - self.eval(&xm)) / (2.0 * FD_STEP);
        }
        g
    }
}

/// The magnetic 2-form.
#[derive(Clone, Debug)]
pub enum MagneticField {
    /// `Ω = b(x) dx¹∧dx²` in the plane.
    Planar(ScalarField),
    /// Constant field vector in space, `Ω_ij = ε_ijk B_k`.
    Uniform(Vec3),
    /// Exact form `Ω = dm` from a potential 1-form in space.
    Potential([ScalarField; 3]),
}

/// A point of the unit sphere bundle: position and a g-unit tangent vector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhasePoint {
    pub x: Vec3,
    pub xi: Vec3,
}

impl PhasePoint {
    pub fn new(x: Vec3, xi: Vec3) -> Self {
        PhasePoint { x, xi }
    }
}

/// Conformally flat magnetic system on the closed unit ball.
#[derive(Clone, Debug)]
pub struct MagneticSystem {
    pub dim: usize,
    pub conformal: ScalarField,
    pub magnetic: MagneticField,
    /// RK4 step in units of arclength.
    pub step: f64,
    /// Traces that have not left the ball after this long are declared trapped.
    pub max_time: f64,
    /// Threshold for strict magnetic convexity.
    pub convexity_margin: f64,
}

impl MagneticSystem {
    /// Flat metric with no magnetic field.
    pub fn flat(dim: usize) -> Self {
        assert!(dim == 2 || dim == 3, "dimension must be 2 or 3");
        let magnetic = if dim == 2 {
            MagneticField::Planar(ScalarField::constant(0.0))
        } else {
            MagneticField::Uniform(Vec3::zeros())
        };
        MagneticSystem {
            dim,
            conformal: ScalarField::constant(1.0),
            magnetic,
            step: 2e-3,
            max_time: 100.0,
            convexity_margin: 1e-6,
        }
    }

    pub fn with_field(mut self, magnetic: MagneticField) -> Self {
        self.magnetic = magnetic;
        self
    }

    pub fn with_constant_b(self, b: f64) -> Self {
        match self.dim {
            2 => self.with_field(MagneticField::Planar(ScalarField::constant(b))),
            _ => self.with_field(MagneticField::Uniform(Vec3::new(0.0, 0.0, b))),
        }
    }

    pub fn with_conformal(mut self, c: ScalarField) -> Self {
        self.conformal = c;
        self
    }

    pub fn with_step(mut self, step: f64) -> Self {
        self.step = step;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.magnetic, self.dim) {
            (MagneticField::Planar(_), 2) => {}
            (MagneticField::Uniform(_) | MagneticField::Potential(_), 3) => {}
            _ => return Err(Error::Invalid("magnetic field does not match the dimension".into())),
        }
        if !(self.step > 0.0) || !(self.max_time > 0.0) {
            return Err(Error::Invalid("step and max_time must be positive".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn c(&self, x: &Vec3) -> f64 {
        self.conformal.eval(x)
    }

    pub fn g_norm(&self, x: &Vec3, v: &Vec3) -> f64 {
        self.c(x).sqrt() * v.norm()
    }

    pub fn g_dot(&self, x: &Vec3, u: &Vec3, v: &Vec3) -> f64 {
        self.c(x) * u.dot(v)
    }

    /// Rescale `v` to unit length in the metric at `x`.
    pub fn unit(&self, x: &Vec3, v: &Vec3) -> Vec3 {
        v / self.g_norm(x, v)
    }

    /// Phase point at `x` pointing along the Euclidean direction `dir`.
    pub fn phase(&self, x: Vec3, dir: Vec3) -> PhasePoint {
        PhasePoint { x, xi: self.unit(&x, &dir) }
    }

    pub fn diameter(&self) -> f64 {
        2.0
    }

    /// Components `Ω_ij` of the magnetic form at `x`.
    pub fn omega(&self, x: &Vec3) -> [[f64; 3]; 3] {
        let mut o = [[0.0; 3]; 3];
        match &self.magnetic {
            MagneticField::Planar(b) => {
                let b = b.eval(x);
                o[0][1] = b;
                o[1][0] = -b;
            }
            MagneticField::Uniform(bv) => {
                o[0][1] = bv[2];
                o[1][0] = -bv[2];
                o[1][2] = bv[0];
                o[2][1] = -bv[0];
                o[2][0] = bv[1];
                o[0][2] = -bv[1];
            }
            MagneticField::Potential(m) => {
                let d = |i: usize, j: usize| -> f64 {
                    let mut xp = *x;
                    let mut xm = *x;
                    xp[i] += FD_STEP;
                    xm[i] -= FD_STEP;
                    (m[j].eval(&xp) - m[j].eval(&xm)) / (2.0 * FD_STEP)
                };
                for i in 0..3 {
                    for j in (i + 1)..3 {
                        let w = d(i, j) - d(j, i);
                        o[i][j] = w;
                        o[j][i] = -w;
                    }
                }
            }
        }
        o
    }

    #[inline]
    fn lorentz_unchecked(&self, x: &Vec3, xi: &Vec3, c: f64) -> Vec3 {
        let o = self.omega(x);
        let mut y = Vec3::zeros();
        for j in 0..3 {
            y[j] = (xi[0] * o[0][j] + xi[1] * o[1][j] + xi[2] * o[2][j]) / c;
        }
        y
    }

    /// The Lorentz force `Y_x(ξ)`, defined by `⟨Y ξ, η⟩_g = Ω(ξ, η)`.
    pub fn lorentz_force(&self, x: &Vec3, xi: &Vec3) -> Result<Vec3> {
        if x.norm_squared() > 1.0 + 1e-9 {
            return Err(Error::Domain([x[0], x[1], x[2]]));
        }
        Ok(self.lorentz_unchecked(x, xi, self.c(x)))
    }

    /// Second derivative of a trajectory through `(x, v)`.
    #[inline]
    pub fn acceleration(&self, x: &Vec3, v: &Vec3) -> Vec3 {
        let c = self.c(x);
        let mut acc = self.lorentz_unchecked(x, v, c);
        if !self.conformal.is_constant() {
            let gphi = self.conformal.gradient(x, self.dim) / (2.0 * c);
            acc += -2.0 * gphi.dot(v) * v + v.norm_squared() * gphi;
        }
        acc
    }

    /// Gradient of `½ log c`, the conformal exponent.
    fn grad_phi(&self, x: &Vec3) -> Vec3 {
        if self.conformal.is_constant() {
            Vec3::zeros()
        } else {
            self.conformal.gradient(x, self.dim) / (2.0 * self.c(x))
        }
    }

    /// One RK4 step of length `h` (negative for backward time), renormalized.
    #[inline]
    pub fn rk4(&self, x: &Vec3, v: &Vec3, h: f64) -> (Vec3, Vec3) {
        let (x1, v1) = self.rk4_raw(x, v, h);
        let v1 = self.unit(&x1, &v1);
        (x1, v1)
    }

    #[inline]
    fn rk4_raw(&self, x: &Vec3, v: &Vec3, h: f64) -> (Vec3, Vec3) {
        let k1x = *v;
        let k1v = self.acceleration(x, v);
        let x2 = x + 0.5 * h * k1x;
        let v2 = v + 0.5 * h * k1v;
        let k2v = self.acceleration(&x2, &v2);
        let x3 = x + 0.5 * h * v2;
        let v3 = v + 0.5 * h * k2v;
        let k3v = self.acceleration(&x3, &v3);
        let x4 = x + h * v3;
        let v4 = v + h * k3v;
        let k4v = self.acceleration(&x4, &v4);
        let x1 = x + h / 6.0 * (k1x + 2.0 * v2 + 2.0 * v3 + v4);
        let v1 = v + h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
        (x1, v1)
    }

    /// Integrate the flow for signed time `t`, ignoring the boundary.
    pub fn flow(&self, p: &PhasePoint, t: f64) -> PhasePoint {
        if t == 0.0 {
            return *p;
        }
        let n = (t.abs() / self.step).ceil().max(1.0) as usize;
        let h = t / n as f64;
        let (mut x, mut v) = (p.x, p.xi);
        for _ in 0..n {
            let (x1, v1) = self.rk4(&x, &v, h);
            x = x1;
            v = v1;
        }
        PhasePoint { x, xi: v }
    }

    fn leg(&self, p: &PhasePoint, dir: f64, max_time: f64, step: f64, record: bool) -> Result<Leg> {
        let r2 = p.x.norm_squared();
        if r2 > 1.0 + 1e-8 {
            return Err(Error::Domain([p.x[0], p.x[1], p.x[2]]));
        }
        let mut samples = Vec::new();
        if record {
            samples.push(Sample { t: 0.0, x: p.x, v: p.xi });
        }
        if r2 >= 1.0 - BOUNDARY_EPS && dir * p.x.dot(&p.xi) >= 0.0 {
            return Ok(Leg { samples, t_exit: 0.0, exit: *p });
        }
        let (mut x, mut v) = (p.x, p.xi);
        let mut t = 0.0f64;
        loop {
            if t.abs() >= max_time {
                return Err(Error::NonSimple(format!(
                    "trajectory from {:?} stays inside for t = {max_time}",
                    [p.x[0], p.x[1], p.x[2]]
                )));
            }
            let h = dir * step;
            let (x1, v1) = self.rk4(&x, &v, h);
            if x1.norm_squared() > 1.0 {
                let (mut lo, mut hi) = (0.0, step);
                while hi - lo > 1e-11 {
                    let mid = 0.5 * (lo + hi);
                    let (xm, _) = self.rk4_raw(&x, &v, dir * mid);
                    if xm.norm_squared() > 1.0 {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                let s = 0.5 * (lo + hi);
                let (xe, ve) = self.rk4(&x, &v, dir * s);
                let xe = xe / xe.norm();
                let te = t + dir * s;
                if record {
                    samples.push(Sample { t: te, x: xe, v: ve });
                }
                return Ok(Leg { samples, t_exit: te, exit: PhasePoint { x: xe, xi: ve } });
            }
            x = x1;
            v = v1;
            t += h;
            if record {
                samples.push(Sample { t, x, v });
            }
        }
    }

    /// Exit times `(τ₋, τ₊)` of the phase point `p`.
    pub fn exit_times(&self, p: &PhasePoint) -> Result<(f64, f64)> {
        let fwd = self.leg(p, 1.0, self.max_time, self.step, false)?;
        let bwd = self.leg(p, -1.0, self.max_time, self.step, false)?;
        Ok((bwd.t_exit, fwd.t_exit))
    }

    /// Exit point in one time direction (`dir = ±1`) and the signed exit time.
    pub fn exit(&self, p: &PhasePoint, dir: f64) -> Result<(f64, PhasePoint)> {
        let l = self.leg(p, dir, self.max_time, self.step, false)?;
        Ok((l.t_exit, l.exit))
    }

    /// Trace the full geodesic through `start` with the system step.
    pub fn trace(&self, start: &PhasePoint) -> Result<GeodesicPath> {
        trace_geodesic(self, start, self.max_time, self.step)
    }

    /// Trace one direction only, keeping samples; `dir = -1` gives `[τ₋, 0]`.
    pub fn trace_half(&self, start: &PhasePoint, dir: f64) -> Result<GeodesicPath> {
        let leg = self.leg(start, dir, self.max_time, self.step, true)?;
        let mut samples = leg.samples;
        if dir < 0.0 {
            samples.reverse();
        }
        let (tm, tp, em, ep) = if dir < 0.0 {
            (leg.t_exit, 0.0, leg.exit, *start)
        } else {
            (0.0, leg.t_exit, *start, leg.exit)
        };
        Ok(GeodesicPath { start: *start, samples, tau_minus: tm, tau_plus: tp, exit_minus: em, exit_plus: ep })
    }

    /// Lorentz-free parallel transport equation right-hand side.
    fn transport_rhs(&self, x: &Vec3, v: &Vec3, w: &Vec3) -> Vec3 {
        let gp = self.grad_phi(x);
        -(v * gp.dot(w) + w * gp.dot(v) - gp * v.dot(w))
    }

    /// Parallel transport of `w0` from `path.start` to time `t` along the path.
    pub fn parallel_transport(&self, path: &GeodesicPath, w0: &Vec3, t: f64) -> Result<Vec3> {
        if t < path.tau_minus - 1e-12 || t > path.tau_plus + 1e-12 {
            return Err(Error::Invalid(format!(
                "time {t} outside [{}, {}]",
                path.tau_minus, path.tau_plus
            )));
        }
        Ok(self.transport_along(&path.start, w0, t))
    }

    /// Parallel transport along the flow from `p` for time `t`, ignoring the boundary.
    pub fn transport_along(&self, p: &PhasePoint, w0: &Vec3, t: f64) -> Vec3 {
        if t == 0.0 {
            return *w0;
        }
        let n = (t.abs() / self.step).ceil().max(1.0) as usize;
        let h = t / n as f64;
        let (mut x, mut v, mut w) = (p.x, p.xi, *w0);
        for _ in 0..n {
            let k1x = v;
            let k1v = self.acceleration(&x, &v);
            let k1w = self.transport_rhs(&x, &v, &w);
            let (x2, v2, w2) = (x + 0.5 * h * k1x, v + 0.5 * h * k1v, w + 0.5 * h * k1w);
            let k2v = self.acceleration(&x2, &v2);
            let k2w = self.transport_rhs(&x2, &v2, &w2);
            let (x3, v3, w3) = (x + 0.5 * h * v2, v + 0.5 * h * k2v, w + 0.5 * h * k2w);
            let k3v = self.acceleration(&x3, &v3);
            let k3w = self.transport_rhs(&x3, &v3, &w3);
            let (x4, v4, w4) = (x + h * v3, v + h * k3v, w + h * k3w);
            let k4v = self.acceleration(&x4, &v4);
            let k4w = self.transport_rhs(&x4, &v4, &w4);
            x += h / 6.0 * (k1x + 2.0 * v2 + 2.0 * v3 + v4);
            v += h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
            w += h / 6.0 * (k1w + 2.0 * k2w + 2.0 * k3w + k4w);
            v = self.unit(&x, &v);
        }
        w
    }

    /// `exp_x(w)`: position after flowing for time `|w|_g` along `w`.
    pub fn magnetic_exp(&self, x: &Vec3, w: &Vec3) -> Vec3 {
        let t = self.g_norm(x, w);
        if t == 0.0 {
            return *x;
        }
        self.flow(&PhasePoint { x: *x, xi: w / t }, t).x
    }

    /// Inverse of the magnetic exponential map by damped Newton shooting.
    pub fn magnetic_exp_inverse(&self, x: &Vec3, y: &Vec3) -> Result<Vec3> {
        let d = self.dim;
        let diff = y - x;
        if diff.norm() < 1e-14 {
            return Ok(Vec3::zeros());
        }
        let resid = |w: &Vec3| -> Vec3 {
            let mut r = self.magnetic_exp(x, w) - y;
            if d == 2 {
                r[2] = 0.0;
            }
            r
        };
        let mut best = diff;
        let mut best_r = resid(&diff).norm();
        for cand in shooting_seeds(d, &diff) {
            let r = resid(&cand).norm();
            if r < best_r {
                best = cand;
                best_r = r;
            }
        }
        let mut w = best;
        let mut r = resid(&w);
        let mut rn = r.norm();
        for _ in 0..50 {
            if rn < 1e-13 {
                break;
            }
            let h = 1e-6 * w.norm().max(1.0);
            let mut jac = DMatrix::<f64>::zeros(d, d);
            for k in 0..d {
                let mut wp = w;
                let mut wm = w;
                wp[k] += h;
                wm[k] -= h;
                let col = (resid(&wp) - resid(&wm)) / (2.0 * h);
                for i in 0..d {
                    jac[(i, k)] = col[i];
                }
            }
            let rhs = DVector::from_iterator(d, (0..d).map(|i| -r[i]));
            let step = match jac.lu().solve(&rhs) {
                Some(s) => s,
                None => return Err(Error::NonSimple("singular shooting Jacobian".into())),
            };
            let mut dw = Vec3::zeros();
            for i in 0..d {
                dw[i] = step[i];
            }
            let mut lambda = 1.0;
            let mut improved = false;
            while lambda > 1e-4 {
                let wn = w + lambda * dw;
                let rnew = resid(&wn);
                if rnew.norm() < rn {
                    w = wn;
                    r = rnew;
                    rn = r.norm();
                    improved = true;
                    break;
                }
                lambda *= 0.5;
            }
            if !improved {
                break;
            }
        }
        if rn < 1e-8 {
            Ok(w)
        } else {
            Err(Error::NoConvergence(format!("shooting residual {rn:.3e}")))
        }
    }

    /// Length of the unit-speed magnetic geodesic from `x` through `y`.
    pub fn magnetic_distance(&self, x: &Vec3, y: &Vec3) -> Result<f64> {
        let w = self.magnetic_exp_inverse(x, y)?;
        Ok(self.g_norm(x, &w))
    }

    /// `d²/dt² (|x|² − 1)` along the trajectory through `(x, v)`.
    ///
    /// At a tangential boundary point a positive value means the trajectory
    /// leaves the ball, so the boundary is strictly magnetic convex there.
    pub fn boundary_second_derivative(&self, x: &Vec3, v: &Vec3) -> f64 {
        2.0 * (v.norm_squared() + x.dot(&self.acceleration(x, v)))
    }
}

fn shooting_seeds(d: usize, diff: &Vec3) -> Vec<Vec3> {
    let mut out = Vec::new();
    let len = diff.norm();
    let e = diff / len;
    let scales = [0.8, 1.0, 1.25];
    if d == 2 {
        for k in -6i32..=6 {
            let a = k as f64 * std::f64::consts::PI / 12.0;
            let (s, c) = a.sin_cos();
            let dir = Vec3::new(c * e[0] - s * e[1], s * e[0] + c * e[1], 0.0);
            for sc in scales {
                out.push(dir * len * sc);
            }
        }
    } else {
        let helper = if e[0].abs() < 0.9 { Vec3::x() } else { Vec3::y() };
        let p = e.cross(&helper).normalize();
        let q = e.cross(&p);
        for i in -3i32..=3 {
            for j in -3i32..=3 {
                let a = i as f64 * 0.25;
                let b = j as f64 * 0.25;
                let dir = (e + a * p + b * q).normalize();
                for sc in scales {
                    out.push(dir * len * sc);
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub struct Sample {
    pub t: f64,
    pub x: Vec3,
    pub v: Vec3,
}

struct Leg {
    samples: Vec<Sample>,
    t_exit: f64,
    exit: PhasePoint,
}

/// Sampled magnetic geodesic through a phase point, ordered by time.
#[derive(Clone, Debug)]
pub struct GeodesicPath {
    pub start: PhasePoint,
    pub samples: Vec<Sample>,
    pub tau_minus: f64,
    pub tau_plus: f64,
    pub exit_minus: PhasePoint,
    pub exit_plus: PhasePoint,
}

impl GeodesicPath {
    pub fn tau(&self) -> f64 {
        self.tau_plus - self.tau_minus
    }

    /// Phase point at time `t` by cubic Hermite interpolation of the samples.
    pub fn phase_at(&self, sys: &MagneticSystem, t: f64) -> PhasePoint {
        let s = &self.samples;
        if s.len() == 1 {
            return PhasePoint { x: s[0].x, xi: s[0].v };
        }
        let t = t.clamp(s[0].t, s[s.len() - 1].t);
        let i = match s.binary_search_by(|p| p.t.partial_cmp(&t).unwrap()) {
            Ok(i) => return PhasePoint { x: s[i].x, xi: s[i].v },
            Err(i) => i.clamp(1, s.len() - 1),
        };
        let (a, b) = (&s[i - 1], &s[i]);
        let h = b.t - a.t;
        if h <= 0.0 {
            return PhasePoint { x: b.x, xi: b.v };
        }
        let u = (t - a.t) / h;
        let (h00, h10, h01, h11) = hermite(u);
        let x = h00 * a.x + h10 * h * a.v + h01 * b.x + h11 * h * b.v;
        let aa = sys.acceleration(&a.x, &a.v);
        let ab = sys.acceleration(&b.x, &b.v);
        let v = h00 * a.v + h10 * h * aa + h01 * b.v + h11 * h * ab;
        PhasePoint { x, xi: sys.unit(&x, &v) }
    }
}

#[inline]
fn hermite(u: f64) -> (f64, f64, f64, f64) {
    let u2 = u * u;
    let u3 = u2 * u;
    (2.0 * u3 - 3.0 * u2 + 1.0, u3 - 2.0 * u2 + u, -2.0 * u3 + 3.0 * u2, u3 - u2)
}

/// Trace the geodesic through `start` in both time directions until it leaves the ball.
pub fn trace_geodesic(sys: &MagneticSystem, start: &PhasePoint, max_time: f64, step: f64) -> Result<GeodesicPath> {
    if !(step > 0.0) {
        return Err(Error::Invalid("step must be positive".into()));
    }
    let fwd = sys.leg(start, 1.0, max_time, step, true)?;
    let bwd = sys.leg(start, -1.0, max_time, step, true)?;
    let mut samples: Vec<Sample> = bwd.samples.into_iter().rev().collect();
    samples.pop();
    samples.extend(fwd.samples);
    Ok(GeodesicPath {
        start: *start,
        samples,
        tau_minus: bwd.t_exit,
        tau_plus: fwd.t_exit,
        exit_minus: bwd.exit,
        exit_plus: fwd.exit,
    })
}

/// Sampling sizes for [`simplicity_check`].
#[derive(Clone, Copy, Debug)]
pub struct SimplicityOptions {
    pub boundary_samples: usize,
    pub interior_samples: usize,
    pub shooting_pairs: usize,
    pub seed: u64,
}

impl Default for SimplicityOptions {
    fn default() -> Self {
        SimplicityOptions { boundary_samples: 64, interior_samples: 24, shooting_pairs: 12, seed: 1 }
    }
}

#[derive(Clone, Debug)]
pub struct SimplicityReport {
    pub pass: bool,
    pub convex: bool,
    /// Smallest `d²/dt²(|x|²−1)` over tangential boundary directions.
    pub convexity_margin: f64,
    pub worst_boundary_point: [f64; 3],
    pub trapped: usize,
    pub shooting_failures: usize,
    pub min_jacobian_det: f64,
}

/// Numerical diagnostic for strict magnetic convexity and the exponential map.
pub fn simplicity_check(sys: &MagneticSystem, opts: &SimplicityOptions) -> SimplicityReport {
    let mut margin = f64::INFINITY;
    let mut worst = [0.0; 3];
    for x in sphere_points(sys.dim, opts.boundary_samples) {
        for t in tangent_directions(sys.dim, &x) {
            let v = sys.unit(&x, &t);
            let r2 = sys.boundary_second_derivative(&x, &v);
            if r2 < margin {
                margin = r2;
                worst = [x[0], x[1], x[2]];
            }
        }
    }
    let convex = margin > sys.convexity_margin;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut trapped = 0;
    for _ in 0..opts.interior_samples {
        let p = random_phase_point(sys, &mut rng, 0.95);
        if sys.exit_times(&p).is_err() {
            trapped += 1;
        }
    }

    let mut failures = 0;
    let mut min_det = f64::INFINITY;
    if convex && trapped == 0 {
        for _ in 0..opts.shooting_pairs {
            let x = random_point(sys.dim, &mut rng, 0.9);
            let y = random_point(sys.dim, &mut rng, 0.9);
            match sys.magnetic_exp_inverse(&x, &y) {
                Ok(w) => min_det = min_det.min(exp_jacobian_det(sys, &x, &w)),
                Err(_) => failures += 1,
            }
        }
    }
    if !min_det.is_finite() {
        min_det = 0.0;
    }
    let pass = convex && trapped == 0 && failures == 0 && min_det > 1e-6;
    SimplicityReport {
        pass,
        convex,
        convexity_margin: margin,
        worst_boundary_point: worst,
        trapped,
        shooting_failures: failures,
        min_jacobian_det: min_det,
    }
}

fn exp_jacobian_det(sys: &MagneticSystem, x: &Vec3, w: &Vec3) -> f64 {
    let d = sys.dim;
    let h = 1e-6 * w.norm().max(1.0);
    let mut jac = DMatrix::<f64>::zeros(d, d);
    for k in 0..d {
        let mut wp = *w;
        let mut wm = *w;
        wp[k] += h;
        wm[k] -= h;
        let col = (sys.magnetic_exp(x, &wp) - sys.magnetic_exp(x, &wm)) / (2.0 * h);
        for i in 0..d {
            jac[(i, k)] = col[i];
        }
    }
    jac.determinant()
}

/// Evenly spread points on the unit circle or sphere.
pub fn sphere_points(dim: usize, n: usize) -> Vec<Vec3> {
    if dim == 2 {
        (0..n)
            .map(|k| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                Vec3::new(a.cos(), a.sin(), 0.0)
            })
            .collect()
    } else {
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        (0..n)
            .map(|k| {
                let z = 1.0 - 2.0 * (k as f64 + 0.5) / n as f64;
                let r = (1.0 - z * z).sqrt();
                let a = golden * k as f64;
                Vec3::new(r * a.cos(), r * a.sin(), z)
            })
            .collect()
    }
}

fn tangent_directions(dim: usize, x: &Vec3) -> Vec<Vec3> {
    if dim == 2 {
        let t = Vec3::new(-x[1], x[0], 0.0);
        vec![t, -t]
    } else {
        let helper = if x[0].abs() < 0.9 { Vec3::x() } else { Vec3::y() };
        let p = x.cross(&helper).normalize();
        let q = x.cross(&p);
        (0..8)
            .map(|k| {
                let a = std::f64::consts::PI * k as f64 / 4.0;
                a.cos() * p + a.sin() * q
            })
            .collect()
    }
}

/// Uniform random point in the ball of radius `r` (disk when `dim == 2`).
pub fn random_point<R: Rng>(dim: usize, rng: &mut R, r: f64) -> Vec3 {
    loop {
        let mut x = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.0);
        if dim == 3 {
            x[2] = rng.gen_range(-1.0..1.0);
        }
        if x.norm_squared() < 1.0 {
            return x * r;
        }
    }
}

/// Uniform random Euclidean unit direction.
pub fn random_direction<R: Rng>(dim: usize, rng: &mut R) -> Vec3 {
    loop {
        let x = random_point(dim, rng, 1.0);
        let n = x.norm();
        if n > 1e-3 {
            return x / n;
        }
    }
}

pub fn random_phase_point<R: Rng>(sys: &MagneticSystem, rng: &mut R, r: f64) -> PhasePoint {
    let x = random_point(sys.dim, rng, r);
    let d = random_direction(sys.dim, rng);
    sys.phase(x, d)
}
