//! Gauge transformations `(a, k) ↦ (a − G_μ log w, w(ξ) k / w(η))`, the
//! constructive gauges used in the stability argument, and the class distance.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::{MagneticSystem, PhasePoint, Vec3};
use crate::par;
use crate::phase_space::{BoundaryGrid, SphereBundleGrid};
use crate::quadrature::{simpson_panels, simpson_weights};
use crate::transport::{AdmissiblePair, Attenuation, ScatteringKernel};

/// `log w` as a function of a point and a Euclidean unit direction.
pub type LogGaugeFn = Arc<dyn Fn(&Vec3, &Vec3) -> Result<f64> + Send + Sync>;

#[derive(Clone)]
pub struct GaugeFunction {
    log_w: LogGaugeFn,
    /// Outside this ball `log w` is constant along the flow.
    pub support_radius: f64,
    /// `w = 1` on `∂₊SM`.
    pub boundary_plus_one: bool,
    /// `w = 1` on all of `∂SM`.
    pub boundary_all_one: bool,
}

impl std::fmt::Debug for GaugeFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "GaugeFunction {{ support_radius: {}, boundary_plus_one: {}, boundary_all_one: {} }}",
            self.support_radius, self.boundary_plus_one, self.boundary_all_one
        )
    }
}

fn euclid(sys: &MagneticSystem, p: &PhasePoint) -> Vec3 {
    (p.xi * sys.c(&p.x).sqrt()).normalize()
}

impl GaugeFunction {
    pub fn identity() -> Self {
        GaugeFunction { log_w: Arc::new(|_, _| Ok(0.0)), support_radius: 0.0, boundary_plus_one: true, boundary_all_one: true }
    }

    /// Gauge from an explicit `log w`, which must be flow-invariant outside `support_radius`.
    /// Boundary flags start unset; see [`GaugeFunction::check`].
    pub fn from_log(support_radius: f64, f: impl Fn(&Vec3, &Vec3) -> f64 + Send + Sync + 'static) -> Self {
        GaugeFunction {
            log_w: Arc::new(move |x, e| Ok(f(x, e))),
            support_radius,
            boundary_plus_one: false,
            boundary_all_one: false,
        }
    }

    fn from_fallible(support_radius: f64, f: LogGaugeFn) -> Self {
        GaugeFunction { log_w: f, support_radius, boundary_plus_one: false, boundary_all_one: false }
    }

    pub fn log_w(&self, x: &Vec3, e: &Vec3) -> Result<f64> {
        (self.log_w)(x, e)
    }

    pub fn log_at(&self, sys: &MagneticSystem, p: &PhasePoint) -> Result<f64> {
        (self.log_w)(&p.x, &euclid(sys, p))
    }

    pub fn w(&self, x: &Vec3, e: &Vec3) -> Result<f64> {
        Ok(self.log_w(x, e)?.exp())
    }

    /// `G_μ log w` by central differences along the flow with the integrator step.
    /// Near the boundary a one-sided second-order stencil keeps the samples inside the ball.
    pub fn generator_log(&self, sys: &MagneticSystem, p: &PhasePoint) -> Result<f64> {
        let h = sys.step;
        let inside = |q: &PhasePoint| q.x.norm_squared() <= 1.0;
        let f = |q: &PhasePoint| self.log_at(sys, q);
        let fwd = sys.flow(p, h);
        let bwd = sys.flow(p, -h);
        if inside(&fwd) && inside(&bwd) {
            return Ok((f(&fwd)? - f(&bwd)?) / (2.0 * h));
        }
        let sign = if inside(&fwd) { 1.0 } else { -1.0 };
        let q1 = sys.flow(p, sign * h);
        let q2 = sys.flow(p, sign * 2.0 * h);
        if !inside(&q1) || !inside(&q2) {
            return Ok(0.0);
        }
        Ok(sign * (-3.0 * f(p)? + 4.0 * f(&q1)? - f(&q2)?) / (2.0 * h))
    }

    /// `w₁ w₂`.
    pub fn product(&self, other: &GaugeFunction) -> GaugeFunction {
        let (a, b) = (self.log_w.clone(), other.log_w.clone());
        GaugeFunction {
            log_w: Arc::new(move |x, e| Ok(a(x, e)? + b(x, e)?)),
            support_radius: self.support_radius.max(other.support_radius),
            boundary_plus_one: self.boundary_plus_one && other.boundary_plus_one,
            boundary_all_one: self.boundary_all_one && other.boundary_all_one,
        }
    }

    /// `1 / w`.
    pub fn inverse(&self) -> GaugeFunction {
        let a = self.log_w.clone();
        GaugeFunction { log_w: Arc::new(move |x, e| Ok(-a(x, e)?)), ..self.clone() }
    }

    /// Set the boundary flags from the values on two boundary grids (tolerance `1e-6` on `w`).
    pub fn check(mut self, sys: &MagneticSystem, inc: &BoundaryGrid, out: &BoundaryGrid) -> Result<Self> {
        let max_dev = |g: &BoundaryGrid| -> Result<f64> {
            let v: Vec<Result<f64>> = par::par_map_slice(&g.nodes, |p| Ok((self.log_at(sys, p)?.exp() - 1.0).abs()));
            v.into_iter().try_fold(0.0f64, |m, r| Ok(m.max(r?)))
        };
        let plus = max_dev(inc)? <= 1e-6;
        let minus = max_dev(out)? <= 1e-6;
        self.boundary_plus_one = plus;
        self.boundary_all_one = plus && minus;
        Ok(self)
    }

    /// `(min w, max w)` over the nodes of a phase-space grid.
    pub fn bounds(&self, grid: &SphereBundleGrid) -> Result<(f64, f64)> {
        let v: Vec<Result<f64>> = par::par_map(grid.len(), |i| {
            let s = i / grid.n_fiber();
            self.w(&grid.spatial.nodes[s], &grid.fiber.dirs[i % grid.n_fiber()])
        });
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for r in v {
            let w = r?;
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::Invalid(format!("gauge value {w} is not positive and finite")));
            }
            lo = lo.min(w);
            hi = hi.max(w);
        }
        Ok((lo, hi))
    }
}

/// `(ã, k̃) = (a − G_μ log w, w(x, ξ) k(x, η, ξ) / w(x, η))`.
pub fn apply_gauge(sys: &MagneticSystem, pair: &AdmissiblePair, w: &GaugeFunction) -> AdmissiblePair {
    let sys_a = Arc::new(sys.clone());
    let (a, k) = (pair.a.clone(), pair.k.clone());
    let wa = w.clone();
    let support = pair.support_radius.max(w.support_radius);
    let a_new = if w.support_radius == 0.0 {
        a
    } else {
        Attenuation::from_fn(move |x, e| {
            let base = a.eval(x, e);
            if x.norm() > wa.support_radius + 2.0 * sys_a.step {
                return base;
            }
            let p = PhasePoint { x: *x, xi: e / sys_a.c(x).sqrt() };
            base - wa.generator_log(&sys_a, &p).unwrap_or(f64::NAN)
        })
    };
    let wk = w.clone();
    let k_new = if k.is_zero() || w.support_radius == 0.0 {
        k
    } else {
        ScatteringKernel::from_fn(move |x, eta, xi| {
            let v = k.eval(x, eta, xi);
            if v == 0.0 {
                return 0.0;
            }
            match (wk.log_w(x, xi), wk.log_w(x, eta)) {
                (Ok(p), Ok(q)) => v * (p - q).exp(),
                _ => f64::NAN,
            }
        })
    };
    AdmissiblePair::new(a_new, k_new, support)
}

/// `−∫_{τ₋}^0 f(φ_s p) ds` along the backward geodesic, by composite Simpson.
fn backward_integral(sys: &MagneticSystem, f: &Attenuation, p: &PhasePoint, spacing: f64) -> Result<f64> {
    let path = sys.trace_half(p, -1.0)?;
    let (t0, t1) = (path.tau_minus, path.tau_plus);
    if t1 - t0 <= 0.0 {
        return Ok(0.0);
    }
    let m = simpson_panels(t1 - t0, spacing);
    let dt = (t1 - t0) / m as f64;
    let w = simpson_weights(m, dt);
    let mut s = 0.0;
    for (l, wl) in w.iter().enumerate() {
        s += wl * f.at(sys, &path.phase_at(sys, t0 + dt * l as f64));
    }
    Ok(-s)
}

/// The trial gauge `w = exp(−∫_{τ₋}^0 (ã − a)(φ_s) ds)`, so that `ã = a − G_μ log w`.
pub fn trial_gauge(sys: &MagneticSystem, pair: &AdmissiblePair, pair_tilde: &AdmissiblePair, spacing: f64) -> GaugeFunction {
    let sys_c = Arc::new(sys.clone());
    let (a, at) = (pair.a.clone(), pair_tilde.a.clone());
    let diff = Attenuation::from_fn(move |x, e| at.eval(x, e) - a.eval(x, e));
    let f: LogGaugeFn = Arc::new(move |x, e| {
        let p = PhasePoint { x: *x, xi: e / sys_c.c(x).sqrt() };
        backward_integral(&sys_c, &diff, &p, spacing)
    });
    let mut g = GaugeFunction::from_fallible(1.0, f);
    g.boundary_plus_one = true;
    g
}

/// `log w̃ = log w + (τ₋/τ) log w(φ_{τ₊})`, which equals one on all of `∂SM`.
pub fn normalize_gauge(sys: &MagneticSystem, w: &GaugeFunction) -> GaugeFunction {
    let sys_c = Arc::new(sys.clone());
    let inner = w.clone();
    let f: LogGaugeFn = Arc::new(move |x, e| {
        let p = PhasePoint { x: *x, xi: e / sys_c.c(x).sqrt() };
        let base = inner.log_at(&sys_c, &p)?;
        let (tm, _) = sys_c.exit(&p, -1.0)?;
        let (tp, exit) = sys_c.exit(&p, 1.0)?;
        let tau = tp - tm;
        if tau < 1e-12 {
            return Ok(0.0);
        }
        Ok(base + tm / tau * inner.log_at(&sys_c, &exit)?)
    });
    let mut g = GaugeFunction::from_fallible(1.0, f);
    g.boundary_plus_one = true;
    g.boundary_all_one = true;
    g
}

/// The representative `(a′, k′) ∈ ⟨a, k⟩` closest to `(ã, k̃)` in the stability construction.
#[derive(Clone, Debug)]
pub struct EquivalentPair {
    pub pair: AdmissiblePair,
    pub trial: GaugeFunction,
    pub normalized: GaugeFunction,
}

pub fn construct_equivalent_pair(
    sys: &MagneticSystem,
    pair: &AdmissiblePair,
    pair_tilde: &AdmissiblePair,
    spacing: f64,
) -> EquivalentPair {
    let trial = trial_gauge(sys, pair, pair_tilde, spacing);
    let normalized = normalize_gauge(sys, &trial);
    let mut p = apply_gauge(sys, pair, &normalized);
    p.support_radius = 1.0;
    EquivalentPair { pair: p, trial, normalized }
}

/// Sample sets on which sup and `L¹` norms over `SM` and `S²M` are evaluated.
#[derive(Clone, Debug)]
pub struct NormSampling {
    /// Phase points for `‖·‖_{L∞(SM)}`.
    pub grid: SphereBundleGrid,
}

impl NormSampling {
    pub fn new(sys: &MagneticSystem, spatial: &[usize], fiber: &[usize]) -> Result<Self> {
        Ok(NormSampling { grid: SphereBundleGrid::new(sys, spatial, fiber)? })
    }

    /// `sup |a₁ − a₂|` over the sample phase points.
    pub fn a_distance(&self, a1: &Attenuation, a2: &Attenuation) -> Result<f64> {
        let g = &self.grid;
        let v: Vec<f64> = par::par_map(g.len(), |i| {
            let (x, e) = (&g.spatial.nodes[i / g.n_fiber()], &g.fiber.dirs[i % g.n_fiber()]);
            (a1.eval(x, e) - a2.eval(x, e)).abs()
        });
        max_finite(&v)
    }

    /// `∫_M ∫∫ |k₁ − k₂| dσ dσ dVol` on the sample grid.
    pub fn k_distance(&self, k1: &ScatteringKernel, k2: &ScatteringKernel) -> Result<f64> {
        let g = &self.grid;
        let nf = g.n_fiber();
        let v: Vec<f64> = par::par_map(g.spatial.len(), |s| {
            let x = &g.spatial.nodes[s];
            let mut acc = 0.0;
            for i in 0..nf {
                for j in 0..nf {
                    let (eta, xi) = (&g.fiber.dirs[i], &g.fiber.dirs[j]);
                    acc += g.fiber.weights[i] * g.fiber.weights[j] * (k1.eval(x, eta, xi) - k2.eval(x, eta, xi)).abs();
                }
            }
            acc * g.volume[s]
        });
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Invalid("non-finite kernel value while measuring a distance".into()));
        }
        Ok(v.iter().sum())
    }

    /// `log w` at every sample phase point, fiber index fastest.
    pub fn log_values(&self, w: &GaugeFunction) -> Result<Vec<f64>> {
        let g = &self.grid;
        let nf = g.n_fiber();
        let v: Vec<Result<f64>> = par::par_map(g.len(), |i| w.log_w(&g.spatial.nodes[i / nf], &g.fiber.dirs[i % nf]));
        v.into_iter().collect()
    }

    /// `‖w(ξ) k₁ / w(η) − k₂‖₁` with `log w` given by [`NormSampling::log_values`].
    pub fn k_gauged_distance(&self, k1: &ScatteringKernel, logs: &[f64], k2: &ScatteringKernel) -> Result<f64> {
        let g = &self.grid;
        let nf = g.n_fiber();
        let v: Vec<f64> = par::par_map(g.spatial.len(), |s| {
            let x = &g.spatial.nodes[s];
            let mut acc = 0.0;
            for i in 0..nf {
                for j in 0..nf {
                    let (eta, xi) = (&g.fiber.dirs[i], &g.fiber.dirs[j]);
                    let kp = k1.eval(x, eta, xi);
                    let kp = if kp == 0.0 { 0.0 } else { kp * (logs[s * nf + j] - logs[s * nf + i]).exp() };
                    acc += g.fiber.weights[i] * g.fiber.weights[j] * (kp - k2.eval(x, eta, xi)).abs();
                }
            }
            acc * g.volume[s]
        });
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Invalid("non-finite kernel value while measuring a distance".into()));
        }
        Ok(v.iter().sum())
    }

    /// `‖k‖_{∞,1} = sup σ_p`.
    pub fn k_inf1(&self, k: &ScatteringKernel) -> f64 {
        let g = &self.grid;
        let v: Vec<f64> = par::par_map(g.len(), |i| {
            let (x, eta) = (&g.spatial.nodes[i / g.n_fiber()], &g.fiber.dirs[i % g.n_fiber()]);
            g.fiber.dirs.iter().zip(&g.fiber.weights).map(|(xi, w)| w * k.eval(x, eta, xi).abs()).sum()
        });
        v.into_iter().fold(0.0, f64::max)
    }

    /// `‖a‖_{L∞}`.
    pub fn a_sup(&self, a: &Attenuation) -> f64 {
        self.a_distance(a, &Attenuation::zero()).unwrap_or(f64::INFINITY)
    }
}

fn max_finite(v: &[f64]) -> Result<f64> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Invalid("non-finite coefficient value while measuring a distance".into()));
    }
    Ok(v.iter().cloned().fold(0.0, f64::max))
}

/// Upper estimate of the class distance `Δ` from the constructed representative.
#[derive(Clone, Debug)]
pub struct GaugeClassDistance {
    pub delta_upper: f64,
    /// `‖a′ − ã‖_∞`.
    pub a_distance: f64,
    /// `‖k′ − k̃‖₁`.
    pub k_distance: f64,
    /// Distances between the given representatives, before any gauge.
    pub raw_a_distance: f64,
    pub raw_k_distance: f64,
    pub representative: EquivalentPair,
}

pub fn gauge_distance(
    sys: &MagneticSystem,
    pair_a: &AdmissiblePair,
    pair_b: &AdmissiblePair,
    sampling: &NormSampling,
    spacing: f64,
) -> Result<GaugeClassDistance> {
    let rep = construct_equivalent_pair(sys, pair_a, pair_b, spacing);
    let a_distance = sampling.a_distance(&rep.pair.a, &pair_b.a)?;
    let logs = sampling.log_values(&rep.normalized)?;
    let k_distance = sampling.k_gauged_distance(&pair_a.k, &logs, &pair_b.k)?;
    Ok(GaugeClassDistance {
        delta_upper: a_distance.max(k_distance),
        a_distance,
        k_distance,
        raw_a_distance: sampling.a_distance(&pair_a.a, &pair_b.a)?,
        raw_k_distance: sampling.k_distance(&pair_a.k, &pair_b.k)?,
        representative: rep,
    })
}

#[derive(Clone, Debug)]
pub struct SymmetricUniquenessReport {
    /// Largest relative asymmetry `|k(η, ξ) − k(ξ, η)| / max k` over both kernels.
    pub asymmetry: f64,
    /// Both kernels are positive inside their support balls.
    pub k_positive: bool,
    /// Symmetry and positivity hold for both kernels.
    pub hypotheses_hold: bool,
    /// `ã(x, ξ) = ã(x, −ξ)` and the same for `a`.
    pub a_symmetric: bool,
    /// Largest relative spread of the detected gauge over a fiber.
    pub fiber_spread: f64,
    pub fiber_constant: bool,
    /// `‖k′ − k̃‖₁ / ‖k̃‖₁`.
    pub k_relative: f64,
    /// `‖a′ − ã‖_∞ / ‖ã‖_∞`, only meaningful in the symmetric-attenuation case.
    pub a_relative: f64,
    pub case_a: bool,
    pub case_b: Option<bool>,
}

/// Check the conclusions of the symmetric-kernel uniqueness result on a pair with equal albedo.
pub fn verify_symmetric_uniqueness(
    sys: &MagneticSystem,
    pair_a: &AdmissiblePair,
    pair_b: &AdmissiblePair,
    sampling: &NormSampling,
    spacing: f64,
    tol: f64,
) -> Result<SymmetricUniquenessReport> {
    let g = &sampling.grid;
    let nf = g.n_fiber();
    let sym = |k: &ScatteringKernel, support: f64| -> (f64, bool) {
        let v: Vec<(f64, f64, bool)> = par::par_map(g.spatial.len(), |s| {
            let x = &g.spatial.nodes[s];
            let (mut diff, mut top, mut pos) = (0.0f64, 0.0f64, true);
            for i in 0..nf {
                for j in 0..nf {
                    let (u, v) = (&g.fiber.dirs[i], &g.fiber.dirs[j]);
                    let (p, q) = (k.eval(x, u, v), k.eval(x, v, u));
                    diff = diff.max((p - q).abs());
                    top = top.max(p.abs());
                    pos &= p > 0.0 || x.norm() >= support;
                }
            }
            (diff, top, pos)
        });
        let top = v.iter().map(|r| r.1).fold(0.0, f64::max);
        let diff = v.iter().map(|r| r.0).fold(0.0, f64::max);
        (if top > 0.0 { diff / top } else { 0.0 }, v.iter().all(|r| r.2))
    };
    let (sa, pa) = sym(&pair_a.k, pair_a.support_radius);
    let (sb, pb) = sym(&pair_b.k, pair_b.support_radius);
    let asymmetry = sa.max(sb);
    let k_positive = pa && pb;
    let hypotheses_hold = k_positive && asymmetry < 1e-9;

    let a_sym = |a: &Attenuation| -> bool {
        (0..g.len()).all(|i| {
            let (x, e) = (&g.spatial.nodes[i / nf], &g.fiber.dirs[i % nf]);
            (a.eval(x, e) - a.eval(x, &-e)).abs() <= 1e-9 * (1.0 + a.eval(x, e).abs())
        })
    };
    let a_symmetric = a_sym(&pair_a.a) && a_sym(&pair_b.a);

    let rep = construct_equivalent_pair(sys, pair_a, pair_b, spacing);
    let logs = sampling.log_values(&rep.normalized)?;
    let support = pair_a.support_radius.max(pair_b.support_radius);
    let mut fiber_spread = 0.0f64;
    for s in 0..g.spatial.len() {
        if g.spatial.nodes[s].norm() > support {
            continue;
        }
        let ws = logs[s * nf..(s + 1) * nf].iter().map(|l| l.exp());
        let (lo, hi) = ws.fold((f64::INFINITY, 0.0f64), |(lo, hi), w| (lo.min(w), hi.max(w)));
        fiber_spread = fiber_spread.max((hi - lo) / hi);
    }
    let k_norm = sampling.k_distance(&pair_b.k, &ScatteringKernel::zero())?;
    let k_relative = sampling.k_gauged_distance(&pair_a.k, &logs, &pair_b.k)? / k_norm.max(f64::MIN_POSITIVE);
    let a_norm = sampling.a_sup(&pair_b.a);
    let a_relative = sampling.a_distance(&rep.pair.a, &pair_b.a)? / a_norm.max(f64::MIN_POSITIVE);
    let fiber_constant = fiber_spread < 0.05;
    let case_a = fiber_constant && k_relative < tol;
    Ok(SymmetricUniquenessReport {
        asymmetry,
        k_positive,
        hypotheses_hold,
        a_symmetric,
        fiber_spread,
        fiber_constant,
        k_relative,
        a_relative,
        case_a,
        case_b: a_symmetric.then_some(case_a && a_relative < tol),
    })
}
