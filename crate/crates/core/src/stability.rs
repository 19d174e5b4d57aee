//! Stability of gauge classes: the pre-estimates on boundary data, the
//! constants of the final estimate, and the experiment that checks them.

use crate::albedo::{albedo_opnorm_l1, AlbedoOperator};
use crate::error::{Error, Result};
use crate::gauge::{construct_equivalent_pair, trial_gauge, EquivalentPair, NormSampling};
use crate::geometry::{sphere_points, MagneticSystem, PhasePoint, Vec3};
use crate::par;
use crate::phase_space::{BoundaryGrid, FiberGrid};
use crate::quadrature::{simpson_panels, simpson_weights};
use crate::transport::{attenuation_e, AdmissiblePair, Attenuation};

/// Volume of the unit ball in `R^{n−1}`.
pub fn omega(dim: usize) -> f64 {
    match dim {
        2 => 2.0,
        3 => std::f64::consts::PI,
        _ => f64::NAN,
    }
}

/// Geometric constants entering the final estimate.
#[derive(Clone, Copy, Debug)]
pub struct Geometry {
    /// `inf τ` over geodesics meeting the support ball.
    pub c0: f64,
    /// `‖τ‖_∞`.
    pub diam_mu: f64,
    pub omega: f64,
    /// `Vol_g(∂M)`.
    pub vol_boundary: f64,
}

/// Measure `c₀`, `diam_μ` and `Vol(∂M)`; `c₀` is taken over geodesics through the ball of radius `support_radius`.
pub fn measure_geometry(sys: &MagneticSystem, support_radius: f64, inc: &BoundaryGrid, samples: usize) -> Result<Geometry> {
    if !(support_radius > 0.0 && support_radius <= 0.9 + 1e-12) {
        return Err(Error::Invalid("the stability constants need a support margin of at least 0.1".into()));
    }
    let pts = sphere_points(sys.dim, samples);
    let dirs = sphere_points(sys.dim, samples);
    let mins: Vec<Result<f64>> = par::par_map_slice(&pts, |p| {
        let x = p * support_radius;
        let mut m = f64::INFINITY;
        for e in &dirs {
            let (tm, tp) = sys.exit_times(&sys.phase(x, *e))?;
            m = m.min(tp - tm);
        }
        Ok(m)
    });
    let c0 = mins.into_iter().try_fold(f64::INFINITY, |m, r| Ok::<f64, Error>(m.min(r?)))?;
    let taus: Vec<Result<f64>> = par::par_map_slice(&inc.nodes, |p| Ok(sys.exit(p, 1.0)?.0));
    let diam_mu = taus.into_iter().try_fold(0.0f64, |m, r| Ok::<f64, Error>(m.max(r?)))?;
    Ok(Geometry { c0, diam_mu, omega: omega(sys.dim), vol_boundary: inc.pos_weights.iter().sum() })
}

#[derive(Clone, Copy, Debug)]
pub struct StabilityConstants {
    pub sigma: f64,
    pub rho: f64,
    pub eps: f64,
    pub c1: f64,
    pub c: f64,
    /// `exp(diam_μ Σ) / c₀`, the constant of the attenuation estimate.
    pub c_a: f64,
    /// `Vol(∂M) ω_{n−1} C₁`, the constant of the kernel estimate.
    pub c_k: f64,
}

/// `C₁` and `C` of the final estimate; `C₁` depends on `ε` itself.
pub fn constants(g: &Geometry, sigma: f64, rho: f64, eps: f64) -> StabilityConstants {
    let growth = (g.diam_mu * sigma).exp();
    let c1 = (1.0 + 2.0 * g.diam_mu * rho * g.omega * growth)
        * (2.0 * g.diam_mu * (eps * growth / g.c0 + sigma)).exp();
    let c_a = growth / g.c0;
    let c_k = g.vol_boundary * g.omega * c1;
    StabilityConstants { sigma, rho, eps, c1, c: c_a.max(c_k), c_a, c_k }
}

/// Attenuation along the forward geodesic from `q` to its exit, for several coefficients on one traced path.
fn forward_attenuations(sys: &MagneticSystem, coeffs: &[&Attenuation], q: &PhasePoint, spacing: f64) -> Result<Vec<f64>> {
    let path = sys.trace_half(q, 1.0)?;
    let (t0, t1) = (path.tau_minus, path.tau_plus);
    if t1 - t0 <= 0.0 {
        return Ok(vec![1.0; coeffs.len()]);
    }
    let m = simpson_panels(t1 - t0, spacing);
    let dt = (t1 - t0) / m as f64;
    let w = simpson_weights(m, dt);
    let mut sums = vec![0.0; coeffs.len()];
    for (l, wl) in w.iter().enumerate() {
        let p = path.phase_at(sys, t0 + dt * l as f64);
        for (s, a) in sums.iter_mut().zip(coeffs) {
            *s += wl * a.at(sys, &p);
        }
    }
    Ok(sums.into_iter().map(|s| (-s).exp()).collect())
}

/// `F(x, ξ, η) = E(x, ξ, τ₋(x, ξ), 0) · E(x, η, 0, τ₊(x, η))`, the attenuation along the broken geodesic.
pub fn broken_attenuation(sys: &MagneticSystem, a: &Attenuation, x: &Vec3, xi: &Vec3, eta: &Vec3, spacing: f64) -> Result<f64> {
    let p = PhasePoint { x: *x, xi: *xi };
    let (tm, _) = sys.exit_times(&p)?;
    let back = attenuation_e(sys, a, &p, tm, 0.0, spacing)?;
    Ok(back * forward_attenuations(sys, &[a], &PhasePoint { x: *x, xi: *eta }, spacing)?[0])
}

#[derive(Clone, Debug)]
pub struct Pre1Report {
    pub eps: f64,
    /// `|E − Ẽ|(x′, ξ′, 0, τ₊)` at every incoming node.
    pub lhs: Vec<f64>,
    pub max_lhs: f64,
    /// Largest `lhs − ε(1 + slack)`, negative when the estimate holds everywhere.
    pub max_violation: f64,
    pub holds: bool,
}

/// `|E − Ẽ| ≤ ‖A − Ã‖` at the incoming nodes, with relative slack.
pub fn check_pre1(
    eps: f64,
    sys: &MagneticSystem,
    pair: &AdmissiblePair,
    pair_tilde: &AdmissiblePair,
    inc: &BoundaryGrid,
    spacing: f64,
    slack: f64,
) -> Result<Pre1Report> {
    let lhs: Vec<Result<f64>> = par::par_map_slice(&inc.nodes, |p| {
        let e = forward_attenuations(sys, &[&pair.a, &pair_tilde.a], p, spacing)?;
        Ok((e[0] - e[1]).abs())
    });
    let lhs: Vec<f64> = lhs.into_iter().collect::<Result<_>>()?;
    let max_lhs = lhs.iter().cloned().fold(0.0, f64::max);
    let max_violation = max_lhs - eps * (1.0 + slack);
    Ok(Pre1Report { eps, lhs, max_lhs, max_violation, holds: max_violation <= 0.0 })
}

#[derive(Clone, Debug)]
pub struct Pre2Ray {
    pub node: usize,
    pub lhs: f64,
    pub rhs: f64,
    /// The same estimate with the roles of the two pairs exchanged.
    pub lhs_swapped: f64,
    pub rhs_swapped: f64,
    pub holds: bool,
}

#[derive(Clone, Debug)]
pub struct Pre2Report {
    pub eps: f64,
    pub rays: Vec<Pre2Ray>,
    /// Largest `lhs / rhs` over both orientations.
    pub worst_ratio: f64,
    pub holds: bool,
}

/// The kernel pre-estimate along the incoming rays of the listed nodes, in both orientations.
#[allow(clippy::too_many_arguments)]
pub fn check_pre2(
    eps: f64,
    sys: &MagneticSystem,
    pair: &AdmissiblePair,
    pair_tilde: &AdmissiblePair,
    inc: &BoundaryGrid,
    nodes: &[usize],
    fiber: &FiberGrid,
    spacing: f64,
    slack: f64,
) -> Result<Pre2Report> {
    let rays: Vec<Result<Pre2Ray>> = par::par_map_slice(nodes, |&node| {
        let p0 = inc.nodes[node];
        let path = sys.trace_half(&p0, 1.0)?;
        let tp = path.tau_plus;
        let m = simpson_panels(tp, spacing);
        let dt = tp / m as f64;
        let w = simpson_weights(m, dt);
        // [∫F(k − k̃), ∫|F − F̃|k̃, ∫F̃(k̃ − k), ∫|F − F̃|k]
        let mut sums = [0.0; 4];
        let (mut cum, mut cum_t) = (0.0, 0.0);
        let mut prev: Option<(f64, f64)> = None;
        for (l, wl) in w.iter().enumerate() {
            let y = path.phase_at(sys, dt * l as f64);
            let (va, vt) = (pair.a.at(sys, &y), pair_tilde.a.at(sys, &y));
            // trapezoid accumulation of the attenuation already met along the ray
            if let Some((pa, pt)) = prev {
                cum += 0.5 * dt * (pa + va);
                cum_t += 0.5 * dt * (pt + vt);
            }
            prev = Some((va, vt));
            let (back, back_t) = ((-cum).exp(), (-cum_t).exp());
            let c = sys.c(&y.x).sqrt();
            let ydot = (y.xi * c).normalize();
            let mut inner = [0.0; 4];
            for (e, fw) in fiber.dirs.iter().zip(&fiber.weights) {
                let (k, kt) = (pair.k.eval(&y.x, &ydot, e), pair_tilde.k.eval(&y.x, &ydot, e));
                if k == 0.0 && kt == 0.0 {
                    continue;
                }
                let fwd = forward_attenuations(sys, &[&pair.a, &pair_tilde.a], &PhasePoint { x: y.x, xi: e / c }, spacing)?;
                let (f, ft) = (back * fwd[0], back_t * fwd[1]);
                inner[0] += fw * f * (k - kt);
                inner[1] += fw * (f - ft).abs() * kt;
                inner[2] += fw * ft * (kt - k);
                inner[3] += fw * (f - ft).abs() * k;
            }
            for (s, v) in sums.iter_mut().zip(inner) {
                *s += wl * v;
            }
        }
        let (rhs, rhs_swapped) = (eps + sums[1], eps + sums[3]);
        let holds = sums[0] <= rhs * (1.0 + slack) && sums[2] <= rhs_swapped * (1.0 + slack);
        Ok(Pre2Ray { node, lhs: sums[0], rhs, lhs_swapped: sums[2], rhs_swapped, holds })
    });
    let rays: Vec<Pre2Ray> = rays.into_iter().collect::<Result<_>>()?;
    let ratio = |l: f64, r: f64| if r > 0.0 { l / r } else if l > 0.0 { f64::INFINITY } else { 0.0 };
    let worst_ratio = rays.iter().map(|r| ratio(r.lhs, r.rhs).max(ratio(r.lhs_swapped, r.rhs_swapped))).fold(f64::NEG_INFINITY, f64::max);
    let holds = rays.iter().all(|r| r.holds);
    Ok(Pre2Report { eps, rays, worst_ratio, holds })
}

/// Node indices spread over the grid by a golden-ratio sequence, so that they do not line up with the position-direction layout.
pub fn spread_nodes(len: usize, count: usize) -> Vec<usize> {
    let count = count.min(len);
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut picked: Vec<usize> = Vec::with_capacity(count);
    let mut i = 0usize;
    while picked.len() < count {
        let j = (((i as f64 + 0.5) * phi).fract() * len as f64) as usize;
        if !picked.contains(&j) {
            picked.push(j);
        }
        i += 1;
    }
    picked
}

#[derive(Clone, Debug)]
pub struct StabilityRun {
    pub eps: f64,
    pub geometry: Geometry,
    pub constants: StabilityConstants,
    /// `‖a′ − ã‖_∞` on the sampling grid.
    pub a_measured: f64,
    /// `‖k′ − k̃‖₁` on the sampling grid.
    pub k_measured: f64,
    pub a_bound: f64,
    pub k_bound: f64,
    pub a_holds: bool,
    pub k_holds: bool,
    pub raw_a: f64,
    pub raw_k: f64,
    /// Largest `|log w|` of the trial gauge at outgoing nodes, and its bound `exp(diam_μ Σ) ε`.
    pub logw_max: f64,
    pub logw_bound: f64,
    pub logw_holds: bool,
    /// Smallest `F′` at the sampled broken geodesics, and its lower bound.
    pub f_min: f64,
    pub f_bound: f64,
    pub f_holds: bool,
    pub representative: EquivalentPair,
}

#[derive(Clone, Debug)]
pub struct ExperimentOptions {
    pub sigma: f64,
    pub rho: f64,
    pub spacing: f64,
    /// Relative slack on the final estimates.
    pub slack: f64,
    /// Number of broken geodesics for the lower bound on `F′`.
    pub f_samples: usize,
    pub geometry_samples: usize,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        ExperimentOptions { sigma: 1.0, rho: 1.0, spacing: 0.02, slack: 0.1, f_samples: 8, geometry_samples: 48 }
    }
}

/// Check that a pair lies in `U_{Σ,ρ}` on the sampling grid.
pub fn check_class(pair: &AdmissiblePair, sampling: &NormSampling, sigma: f64, rho: f64) -> Result<()> {
    let a = sampling.a_sup(&pair.a);
    let k = sampling.k_inf1(&pair.k);
    if a > sigma || k > rho {
        return Err(Error::Refused(format!("pair outside the class: ‖a‖∞ = {a:.4} (Σ = {sigma}), ‖k‖∞,1 = {k:.4} (ρ = {rho})")));
    }
    Ok(())
}

/// Run the full stability chain for two pairs whose albedo matrices are given.
#[allow(clippy::too_many_arguments)]
pub fn stability_experiment(
    sys: &MagneticSystem,
    pair: &AdmissiblePair,
    pair_tilde: &AdmissiblePair,
    albedo: &AlbedoOperator,
    albedo_tilde: &AlbedoOperator,
    inc: &BoundaryGrid,
    out: &BoundaryGrid,
    sampling: &NormSampling,
    opts: &ExperimentOptions,
) -> Result<StabilityRun> {
    check_class(pair, sampling, opts.sigma, opts.rho)?;
    check_class(pair_tilde, sampling, opts.sigma, opts.rho)?;
    let eps = albedo_opnorm_l1(albedo, albedo_tilde)?;
    let support = pair.support_radius.max(pair_tilde.support_radius);
    let geometry = measure_geometry(sys, support, inc, opts.geometry_samples)?;
    let k = constants(&geometry, opts.sigma, opts.rho, eps);

    let rep = construct_equivalent_pair(sys, pair, pair_tilde, opts.spacing);
    let logs = sampling.log_values(&rep.normalized)?;
    let a_measured = sampling.a_distance(&rep.pair.a, &pair_tilde.a)?;
    let k_measured = sampling.k_gauged_distance(&pair.k, &logs, &pair_tilde.k)?;
    let raw_a = sampling.a_distance(&pair.a, &pair_tilde.a)?;
    let raw_k = sampling.k_distance(&pair.k, &pair_tilde.k)?;

    let trial = trial_gauge(sys, pair, pair_tilde, opts.spacing);
    let lw: Vec<Result<f64>> = par::par_map_slice(&out.nodes, |p| Ok(trial.log_at(sys, p)?.abs()));
    let logw_max = lw.into_iter().try_fold(0.0f64, |m, r| Ok::<f64, Error>(m.max(r?)))?;
    let growth = (geometry.diam_mu * opts.sigma).exp();
    let logw_bound = growth * eps;

    // lower bound on F′ along broken geodesics starting at incoming nodes
    let f_bound = (-2.0 * (eps * growth + geometry.diam_mu * opts.sigma)).exp();
    let picks = spread_nodes(inc.len(), opts.f_samples);
    let fs: Vec<Result<f64>> = par::par_map_slice(&picks, |&j| {
        let p0 = inc.nodes[j];
        let (_, tp) = sys.exit_times(&p0)?;
        let y = sys.flow(&p0, 0.5 * tp);
        let e = (y.xi * sys.c(&y.x).sqrt()).normalize();
        let turn = Vec3::new(-e[1], e[0], 0.0);
        let eta = (e + turn).normalize() / sys.c(&y.x).sqrt();
        let back = attenuation_e(sys, &rep.pair.a, &p0, 0.0, 0.5 * tp, opts.spacing)?;
        Ok(back * forward_attenuations(sys, &[&rep.pair.a], &PhasePoint { x: y.x, xi: eta }, opts.spacing)?[0])
    });
    let f_min = fs.into_iter().try_fold(f64::INFINITY, |m, r| Ok::<f64, Error>(m.min(r?)))?;

    let a_bound = k.c * eps;
    let k_bound = k.c * eps;
    Ok(StabilityRun {
        eps,
        geometry,
        constants: k,
        a_measured,
        k_measured,
        a_bound,
        k_bound,
        a_holds: a_measured <= a_bound * (1.0 + opts.slack),
        k_holds: k_measured <= k_bound * (1.0 + opts.slack),
        raw_a,
        raw_k,
        logw_max,
        logw_bound,
        logw_holds: logw_max <= logw_bound * (1.0 + opts.slack),
        f_min,
        f_bound,
        f_holds: f_min >= f_bound * (1.0 - opts.slack),
        representative: rep,
    })
}
