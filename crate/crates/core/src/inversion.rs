//! Recovery of `(a, k)` from albedo data: ray-transform extraction,
//! regularized inversion for an isotropic attenuation, and pointwise
//! recovery of the scattering kernel from localized probes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::albedo::{ballistic_albedo, grid_id, AlbedoOperator, AlbedoProbe, ColumnMethod};
use crate::error::{Error, Result};
use crate::geometry::{random_direction, random_point, MagneticSystem, PhasePoint, Vec3};
use crate::par;
use crate::phase_space::{delta_family_psi, BoundaryGrid, ScatterFrame};
use crate::quadrature::{simpson_panels, simpson_weights};
use crate::transport::{attenuation_e, AdmissiblePair, Attenuation, Csr, RayOptions};

/// Two-point Richardson extrapolation assuming a first-order bias in the width.
pub fn richardson(coarse: (f64, f64), fine: (f64, f64)) -> f64 {
    let r = coarse.0 / fine.0;
    (r * fine.1 - coarse.1) / (r - 1.0)
}

#[derive(Clone, Debug)]
pub struct RayTransformData {
    /// Outgoing nodes; the value at a node belongs to its backward geodesic.
    pub nodes: Vec<PhasePoint>,
    /// `∫_{τ₋}^0 a(γ(t)) dt`, clamped to be non-negative.
    pub values: Vec<f64>,
    /// Extrapolated `E(x, ξ, τ₋, 0)`.
    pub e_estimates: Vec<f64>,
    /// `E` estimate for every width in `eps_list`.
    pub sequences: Vec<Vec<f64>>,
    pub residuals: Vec<f64>,
    pub flagged: Vec<bool>,
    pub eps_list: Vec<f64>,
}

impl RayTransformData {
    pub fn usable(&self) -> usize {
        self.flagged.iter().filter(|f| !**f).count()
    }
}

/// `∫_{τ₋}^0 a` along the backward geodesic of an outgoing phase point.
pub fn line_integral(sys: &MagneticSystem, a: &Attenuation, p: &PhasePoint, spacing: f64) -> Result<f64> {
    let (tm, _) = sys.exit_times(p)?;
    Ok(-attenuation_e(sys, a, p, tm, 0.0, spacing)?.ln())
}

/// Recover the ray transform of `a` from an albedo matrix.
///
/// Each row is paired with `ψ_ε(|x′ − x*|)`, where `x*` is the backward exit
/// point of the row's geodesic. The pairing is divided by the same pairing of
/// the vacuum albedo on the same grids, which removes the interpolation
/// footprint, and the result is extrapolated to `ε = 0`.
pub fn extract_ray_transform(
    a: &AlbedoOperator,
    sys: &MagneticSystem,
    inc: &BoundaryGrid,
    out: &BoundaryGrid,
    eps_list: &[f64],
    ray: RayOptions,
) -> Result<RayTransformData> {
    if a.grid_id != grid_id(inc, out) {
        return Err(Error::Invalid("albedo matrix was built on different grids".into()));
    }
    if a.method != ColumnMethod::Delta {
        return Err(Error::Invalid("ray-transform extraction needs nodal columns".into()));
    }
    if eps_list.len() < 2 || eps_list.windows(2).any(|w| !(w[1] < w[0])) || eps_list.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::Invalid("ε list must hold at least two positive, strictly decreasing widths".into()));
    }
    let vacuum = ballistic_albedo(sys, &Attenuation::zero(), inc, out, ray)?;
    let nd = inc.n_dir();
    let eps_max = eps_list[0];
    let rows: Vec<Result<(Vec<f64>, f64, f64, bool)>> = par::par_map(out.len(), |i| {
        let (_, back) = sys.exit(&out.nodes[i], -1.0)?;
        let xs = back.x;
        let dist: Vec<Option<f64>> = inc
            .positions
            .iter()
            .map(|x| {
                let d = (x - xs).norm();
                (d < eps_max).then_some(d)
            })
            .collect();
        let pairing = |row: &[(usize, f64)], eps: f64| -> f64 {
            let psi = delta_family_psi(eps);
            row.iter().map(|(j, v)| dist[j / nd].map_or(0.0, |d| v * psi(d))).sum()
        };
        let (ra, rv) = (a.row_entries(i), vacuum.row_entries(i));
        let mut seq = Vec::with_capacity(eps_list.len());
        let mut missing = false;
        for &eps in eps_list {
            let p0 = pairing(&rv, eps);
            if p0 <= 0.0 {
                missing = true;
                seq.push(f64::NAN);
            } else {
                seq.push(pairing(&ra, eps) / p0);
            }
        }
        let m = seq.len();
        if missing {
            return Ok((seq, f64::NAN, f64::INFINITY, true));
        }
        let est = richardson((eps_list[m - 2], seq[m - 2]), (eps_list[m - 1], seq[m - 1]));
        let residual = if m >= 3 {
            (est - richardson((eps_list[m - 3], seq[m - 3]), (eps_list[m - 2], seq[m - 2]))).abs()
        } else {
            (est - seq[m - 1]).abs()
        };
        let flagged = !(est > 0.0) || residual > 0.1 * est;
        Ok((seq, est, residual, flagged))
    });
    let mut data = RayTransformData {
        nodes: out.nodes.clone(),
        values: Vec::with_capacity(out.len()),
        e_estimates: Vec::with_capacity(out.len()),
        sequences: Vec::with_capacity(out.len()),
        residuals: Vec::with_capacity(out.len()),
        flagged: Vec::with_capacity(out.len()),
        eps_list: eps_list.to_vec(),
    };
    for r in rows {
        let (seq, est, res, flag) = r?;
        data.values.push(if est > 0.0 { (-est.ln()).max(0.0) } else { 0.0 });
        data.e_estimates.push(est);
        data.sequences.push(seq);
        data.residuals.push(res);
        data.flagged.push(flag);
    }
    Ok(data)
}

/// Multilinear nodal basis on a Cartesian grid over `[−1, 1]^n`, restricted to nodes touching the unit ball.
#[derive(Clone, Debug)]
pub struct PixelGrid {
    pub dim: usize,
    pub n: usize,
    pub h: f64,
    /// Coordinates of the active nodes.
    pub nodes: Vec<Vec3>,
    full_to_active: Vec<Option<u32>>,
}

impl PixelGrid {
    pub fn new(dim: usize, n: usize) -> Result<Self> {
        if !(dim == 2 || dim == 3) || n < 3 {
            return Err(Error::Invalid("pixel grid needs dimension 2 or 3 and at least 3 nodes per axis".into()));
        }
        let h = 2.0 / (n - 1) as f64;
        let reach = 1.0 + h * (dim as f64).sqrt() + 1e-12;
        let total = n.pow(dim as u32);
        let mut nodes = Vec::new();
        let mut full_to_active = vec![None; total];
        for f in 0..total {
            let x = Self::coords(dim, n, h, f);
            if x.norm() <= reach {
                full_to_active[f] = Some(nodes.len() as u32);
                nodes.push(x);
            }
        }
        Ok(PixelGrid { dim, n, h, nodes, full_to_active })
    }

    fn coords(dim: usize, n: usize, h: f64, f: usize) -> Vec3 {
        let mut x = Vec3::zeros();
        let mut r = f;
        for k in 0..dim {
            x[k] = -1.0 + h * (r % n) as f64;
            r /= n;
        }
        x
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Active node indices and multilinear weights at `x`.
    pub fn stencil(&self, x: &Vec3) -> Vec<(usize, f64)> {
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for k in 0..self.dim {
            let u = ((x[k] + 1.0) / self.h).clamp(0.0, (self.n - 1) as f64 - 1e-12);
            base[k] = u.floor() as usize;
            frac[k] = u - base[k] as f64;
        }
        let mut out = Vec::with_capacity(1 << self.dim);
        for corner in 0..(1usize << self.dim) {
            let mut w = 1.0;
            let mut f = 0;
            let mut stride = 1;
            for k in 0..self.dim {
                let bit = (corner >> k) & 1;
                w *= if bit == 1 { frac[k] } else { 1.0 - frac[k] };
                f += (base[k] + bit) * stride;
                stride *= self.n;
            }
            if w > 0.0 {
                if let Some(a) = self.full_to_active[f] {
                    out.push((a as usize, w));
                }
            }
        }
        out
    }

    pub fn eval(&self, coeffs: &[f64], x: &Vec3) -> f64 {
        self.stencil(x).iter().map(|(i, w)| coeffs[*i] * w).sum()
    }

    /// Pairs of active nodes adjacent along an axis.
    pub fn neighbour_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        let total = self.n.pow(self.dim as u32);
        for f in 0..total {
            let Some(p) = self.full_to_active[f] else { continue };
            let mut stride = 1;
            let mut r = f;
            for _ in 0..self.dim {
                if r % self.n + 1 < self.n {
                    if let Some(q) = self.full_to_active[f + stride] {
                        pairs.push((p as usize, q as usize));
                    }
                }
                r /= self.n;
                stride *= self.n;
            }
        }
        pairs
    }

    /// Values of `f` at the active nodes.
    pub fn sample(&self, f: impl Fn(&Vec3) -> f64) -> Vec<f64> {
        self.nodes.iter().map(f).collect()
    }

    /// Relative `L²` error over the nodes inside the closed unit ball.
    pub fn relative_l2(&self, coeffs: &[f64], truth: impl Fn(&Vec3) -> f64) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for (x, c) in self.nodes.iter().zip(coeffs) {
            if x.norm() <= 1.0 {
                let t = truth(x);
                num += (c - t).powi(2);
                den += t * t;
            }
        }
        (num / den.max(f64::MIN_POSITIVE)).sqrt()
    }
}

/// Discrete forward ray transform: one row per backward geodesic of an outgoing node.
pub fn ray_matrix(sys: &MagneticSystem, grid: &PixelGrid, nodes: &[PhasePoint]) -> Result<Csr> {
    let spacing = grid.h / 4.0;
    let rows: Vec<Result<Vec<(usize, f64)>>> = par::par_map_slice(nodes, |p| {
        let path = sys.trace_half(p, -1.0)?;
        let (t0, t1) = (path.tau_minus, path.tau_plus);
        let m = simpson_panels(t1 - t0, spacing);
        let dt = (t1 - t0) / m as f64;
        let w = simpson_weights(m, dt);
        let mut acc: Vec<(usize, f64)> = Vec::new();
        for (l, wl) in w.iter().enumerate() {
            let x = path.phase_at(sys, t0 + dt * l as f64).x;
            for (i, v) in grid.stencil(&x) {
                acc.push((i, wl * v));
            }
        }
        acc.sort_by_key(|e| e.0);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(acc.len());
        for (i, v) in acc {
            match merged.last_mut() {
                Some(last) if last.0 == i => last.1 += v,
                _ => merged.push((i, v)),
            }
        }
        Ok(merged)
    });
    let mut ptr = vec![0];
    let mut idx = Vec::new();
    let mut val = Vec::new();
    for r in rows {
        for (i, v) in r? {
            idx.push(i as u32);
            val.push(v);
        }
        ptr.push(idx.len());
    }
    Ok(Csr { ptr, idx, val })
}

#[derive(Clone, Copy, Debug)]
pub struct CgOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for CgOptions {
    fn default() -> Self {
        CgOptions { tol: 1e-10, max_iter: 5000 }
    }
}

#[derive(Clone, Debug)]
pub struct RecoveredField {
    pub grid: PixelGrid,
    pub coeffs: Vec<f64>,
    pub lambda: f64,
    pub rows: usize,
    pub iterations: usize,
    /// `‖Ra − d‖ / ‖d‖`.
    pub data_residual: f64,
    /// Fewer usable geodesics than unknowns.
    pub underdetermined: bool,
}

impl RecoveredField {
    /// The field as an isotropic attenuation, clamped at zero outside the ball and below.
    pub fn to_attenuation(&self) -> Attenuation {
        let grid = self.grid.clone();
        let coeffs = self.coeffs.clone();
        Attenuation::isotropic(move |x| if x.norm() > 1.0 { 0.0 } else { grid.eval(&coeffs, x).max(0.0) })
    }
}

/// Regularized least squares `min ‖Ra − d‖² + λ ∫|∇a|²` by preconditioned CG on the normal equations.
pub fn invert_ray_transform(
    data: &RayTransformData,
    sys: &MagneticSystem,
    grid: &PixelGrid,
    lambda: f64,
    cg: CgOptions,
) -> Result<RecoveredField> {
    if !(lambda >= 0.0) {
        return Err(Error::Invalid("λ must be non-negative".into()));
    }
    let keep: Vec<usize> = (0..data.nodes.len()).filter(|&i| !data.flagged[i]).collect();
    let nodes: Vec<PhasePoint> = keep.iter().map(|&i| data.nodes[i]).collect();
    let d: Vec<f64> = keep.iter().map(|&i| data.values[i]).collect();
    let r = ray_matrix(sys, grid, &nodes)?;
    solve_normal_equations(&r, &d, grid, lambda, cg)
}

/// Solve the regularized normal equations for a given ray matrix.
pub fn solve_normal_equations(r: &Csr, d: &[f64], grid: &PixelGrid, lambda: f64, cg: CgOptions) -> Result<RecoveredField> {
    let n = grid.len();
    let m = r.rows();
    if m == 0 {
        return Err(Error::Invalid("no usable geodesics".into()));
    }
    let pairs = grid.neighbour_pairs();
    let reg = lambda * grid.h.powi(grid.dim as i32 - 2);
    let apply = |x: &[f64]| -> Vec<f64> {
        let rx = r.apply_block(x, 1);
        let mut y = r.apply_transpose(&rx, n);
        if reg > 0.0 {
            for &(p, q) in &pairs {
                let g = reg * (x[p] - x[q]);
                y[p] += g;
                y[q] -= g;
            }
        }
        y
    };
    let b = r.apply_transpose(d, n);
    let mut diag = vec![0.0; n];
    for q in 0..m {
        for (i, v) in r.row(q) {
            diag[i] += v * v;
        }
    }
    for &(p, q) in &pairs {
        diag[p] += reg;
        diag[q] += reg;
    }
    let precond: Vec<f64> = diag.iter().map(|v| if *v > 0.0 { 1.0 / v } else { 1.0 }).collect();
    let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut x = vec![0.0; n];
    let mut iterations = 0;
    if bnorm > 0.0 {
        let mut res = b.clone();
        let mut z: Vec<f64> = res.iter().zip(&precond).map(|(a, p)| a * p).collect();
        let mut p = z.clone();
        let mut rz: f64 = res.iter().zip(&z).map(|(a, b)| a * b).sum();
        let mut converged = false;
        for it in 0..cg.max_iter {
            iterations = it + 1;
            let ap = apply(&p);
            let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
            if !(pap > 0.0) {
                break;
            }
            let alpha = rz / pap;
            for i in 0..n {
                x[i] += alpha * p[i];
                res[i] -= alpha * ap[i];
            }
            if res.iter().map(|v| v * v).sum::<f64>().sqrt() <= cg.tol * bnorm {
                converged = true;
                break;
            }
            for i in 0..n {
                z[i] = res[i] * precond[i];
            }
            let rz_new: f64 = res.iter().zip(&z).map(|(a, b)| a * b).sum();
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
        if !converged {
            let rel = res.iter().map(|v| v * v).sum::<f64>().sqrt() / bnorm;
            if rel > 1e-6 {
                return Err(Error::NoConvergence(format!(
                    "CG stagnated after {iterations} iterations at relative residual {rel:.3e}"
                )));
            }
        }
    }
    let rx = r.apply_block(&x, 1);
    let num = rx.iter().zip(d).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let den = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(RecoveredField {
        grid: grid.clone(),
        coeffs: x,
        lambda,
        rows: m,
        iterations,
        data_residual: if den > 0.0 { num / den } else { num },
        underdetermined: m < n,
    })
}

/// A point of `W`: position, incoming direction `η′` and outgoing direction `η` (g-unit).
#[derive(Clone, Copy, Debug)]
pub struct ScatterConfig {
    pub y: Vec3,
    pub eta_in: Vec3,
    pub eta_out: Vec3,
}

#[derive(Clone, Debug)]
pub struct ScatteringSample {
    pub config: ScatterConfig,
    pub alignment: f64,
    /// Probe responses along the schedule.
    pub responses: Vec<f64>,
    /// Extrapolated `E·E·k`.
    pub product: f64,
    /// `E·E` from the recovered attenuation.
    pub e_factor: f64,
    pub estimate: f64,
}

/// Widths `(ε, ρ, δ)` of one probe; schedules are listed from coarse to fine.
pub type ProbeWidths = (f64, f64, f64);

/// Recover `k(y, η′, η)` from probe responses of the albedo.
pub fn extract_scattering(
    probe: &AlbedoProbe,
    recovered_a: &Attenuation,
    cfg: &ScatterConfig,
    schedule: &[ProbeWidths],
) -> Result<ScatteringSample> {
    let sys = probe.sys;
    if sys.dim < 3 {
        return Err(Error::Invalid(
            "scattering recovery needs dimension at least 3: in the plane the probe support does not shrink to a null set"
                .into(),
        ));
    }
    if schedule.is_empty() || schedule.windows(2).any(|w| !(w[1].2 < w[0].2)) {
        return Err(Error::Invalid("probe schedule must have strictly decreasing δ".into()));
    }
    let frame = ScatterFrame::new(sys, cfg.y, cfg.eta_in, cfg.eta_out)?;
    if frame.flagged() {
        return Err(Error::Degenerate(format!("|⟨η, η′⟩| = {:.5} is too close to one", frame.alignment)));
    }
    let mut responses = Vec::with_capacity(schedule.len());
    for &(eps, rho, delta) in schedule {
        responses.push(probe.respond(&frame, eps, rho, delta)?.total);
    }
    let m = responses.len();
    let product = if m == 1 {
        responses[0]
    } else {
        richardson((schedule[m - 2].2, responses[m - 2]), (schedule[m - 1].2, responses[m - 1]))
    };
    let out = PhasePoint { x: frame.y, xi: frame.eta_out };
    let (_, tp) = sys.exit_times(&out)?;
    let inc = PhasePoint { x: frame.y, xi: frame.eta_in };
    let e_factor = attenuation_e(sys, recovered_a, &out, 0.0, tp, probe.spacing)?
        * attenuation_e(sys, recovered_a, &inc, frame.tau_in, 0.0, probe.spacing)?;
    if e_factor < 1e-12 {
        return Err(Error::Degenerate("attenuation factor below 1e-12".into()));
    }
    Ok(ScatteringSample {
        config: *cfg,
        alignment: frame.alignment,
        responses,
        product,
        e_factor,
        estimate: product / e_factor,
    })
}

/// Random configurations in `W` with `|⟨η, η′⟩| ≤ max_alignment` and positions within `radius`.
pub fn sample_configurations(
    sys: &MagneticSystem,
    count: usize,
    seed: u64,
    radius: f64,
    max_alignment: f64,
) -> Result<Vec<ScatterConfig>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut tries = 0;
    while out.len() < count {
        tries += 1;
        if tries > 100 * count + 100 {
            return Err(Error::Invalid("could not sample enough well-conditioned configurations".into()));
        }
        let y = random_point(sys.dim, &mut rng, radius);
        let eta_in = sys.unit(&y, &random_direction(sys.dim, &mut rng));
        let eta_out = sys.unit(&y, &random_direction(sys.dim, &mut rng));
        if sys.g_dot(&y, &eta_in, &eta_out).abs() > max_alignment || rng.gen::<f64>() > 1.0 {
            continue;
        }
        if ScatterFrame::new(sys, y, eta_in, eta_out).is_ok() {
            out.push(ScatterConfig { y, eta_in, eta_out });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct PipelineConfig {
    pub eps_list: Vec<f64>,
    pub lambda: f64,
    pub pixels: usize,
    pub ray: RayOptions,
    pub cg: CgOptions,
    pub schedule: Vec<ProbeWidths>,
    pub configs: Vec<ScatterConfig>,
}

#[derive(Clone, Debug, Default)]
pub struct ErrorReport {
    pub a_relative_l2: f64,
    /// Largest relative error of the extracted ray transform on usable nodes whose value is at least 10% of the maximum.
    pub ray_max_relative: f64,
    /// Largest absolute error of the extracted ray transform on usable nodes, divided by the maximum value.
    pub ray_max_absolute: f64,
    pub k_max_relative: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub rays: RayTransformData,
    pub field: RecoveredField,
    pub samples: Vec<ScatteringSample>,
    pub errors: Option<ErrorReport>,
}

/// Extract the ray transform, invert it, then recover `k` at the configured samples.
pub fn reconstruct_pair(
    albedo: &AlbedoOperator,
    probe: Option<&AlbedoProbe>,
    sys: &MagneticSystem,
    inc: &BoundaryGrid,
    out: &BoundaryGrid,
    cfg: &PipelineConfig,
    truth: Option<&AdmissiblePair>,
) -> Result<Reconstruction> {
    let rays = extract_ray_transform(albedo, sys, inc, out, &cfg.eps_list, cfg.ray)?;
    let grid = PixelGrid::new(sys.dim, cfg.pixels)?;
    let field = invert_ray_transform(&rays, sys, &grid, cfg.lambda, cfg.cg)?;
    let recovered = field.to_attenuation();
    let mut samples = Vec::new();
    if let Some(probe) = probe {
        for c in &cfg.configs {
            samples.push(extract_scattering(probe, &recovered, c, &cfg.schedule)?);
        }
    }
    let errors = match truth {
        Some(t) => Some(error_report(sys, t, &rays, &field, &samples, cfg.ray.spacing)?),
        None => None,
    };
    Ok(Reconstruction { rays, field, samples, errors })
}

/// Compare a reconstruction with the coefficients that generated the data.
pub fn error_report(
    sys: &MagneticSystem,
    truth: &AdmissiblePair,
    rays: &RayTransformData,
    field: &RecoveredField,
    samples: &[ScatteringSample],
    spacing: f64,
) -> Result<ErrorReport> {
    let zero = Vec3::zeros();
    let a_iso = |x: &Vec3| truth.a.eval(x, &zero);
    let a_relative_l2 = field.grid.relative_l2(&field.coeffs, a_iso);
    let direct: Vec<Result<f64>> = par::par_map_slice(&rays.nodes, |p| line_integral(sys, &truth.a, p, spacing));
    let direct: Vec<f64> = direct.into_iter().collect::<Result<_>>()?;
    let top = direct.iter().cloned().fold(0.0, f64::max);
    let mut ray_max_relative: f64 = 0.0;
    let mut ray_max_absolute: f64 = 0.0;
    for i in 0..direct.len() {
        if rays.flagged[i] {
            continue;
        }
        let err = (rays.values[i] - direct[i]).abs();
        ray_max_absolute = ray_max_absolute.max(err / top.max(f64::MIN_POSITIVE));
        if direct[i] >= 0.1 * top {
            ray_max_relative = ray_max_relative.max(err / direct[i]);
        }
    }
    let k_max_relative = if samples.is_empty() {
        None
    } else {
        let mut worst: f64 = 0.0;
        for s in samples {
            let c = sys.c(&s.config.y).sqrt();
            let k = truth.k.eval(&s.config.y, &(s.config.eta_in * c), &(s.config.eta_out * c));
            worst = worst.max((s.estimate - k).abs() / k.abs().max(f64::MIN_POSITIVE));
        }
        Some(worst)
    };
    Ok(ErrorReport { a_relative_l2, ray_max_relative, ray_max_absolute, k_max_relative })
}
