//! The discrete albedo operator, its ballistic / single / multiple scattering
//! split, and the `L¹(∂₊SM) → L¹(∂₋SM)` operator norm.
//!
//! Entry `A[i][j]` is the outgoing value at node `i` produced by the incoming
//! nodal basis function of node `j`, so `(A u₊)_i = Σ_j A[i][j] u₊_j` and the
//! kernel is `α ≈ A[i][j] / μ_j`.

use crate::error::{Error, Result};
use crate::geometry::{GeodesicPath, MagneticSystem, PhasePoint, Vec3};
use crate::par;
use crate::phase_space::{tangent_frame, BoundaryGrid, FiberGrid, FiberMollifier, ScatterFrame, Side, SphereBundleGrid};
use crate::quadrature::{cumulative_tail, gauss_legendre, simpson_panels};
use crate::transport::{
    AdmissiblePair, Attenuation, Csr, RayOptions, RayTable, SolveMode, SolveReport, SubcriticalReport, Transport,
};

/// How the columns of an albedo matrix were probed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ColumnMethod {
    /// Nodal basis functions; column `j` has input norm `μ_j`.
    Delta,
    /// Unit-mass box functions `w_ε` centered at the nodes.
    Mollified(f64),
}

#[derive(Clone, Debug)]
pub enum Entries {
    /// Row-major `n_out × n_in`.
    Dense(Vec<f64>),
    Sparse(Csr),
}

#[derive(Clone, Debug)]
pub struct AlbedoOperator {
    pub n_out: usize,
    pub n_in: usize,
    pub entries: Entries,
    /// `dμ` weights of the outgoing nodes.
    pub mu_out: Vec<f64>,
    /// `L¹(dμ)` norm of the probe used for each column.
    pub input_norms: Vec<f64>,
    pub method: ColumnMethod,
    /// Identifier of the boundary grids the matrix lives on.
    pub grid_id: String,
}

impl AlbedoOperator {
    pub fn dense(n_out: usize, n_in: usize, values: Vec<f64>, inc: &BoundaryGrid, out: &BoundaryGrid) -> Self {
        AlbedoOperator {
            n_out,
            n_in,
            entries: Entries::Dense(values),
            mu_out: out.weights.clone(),
            input_norms: inc.weights.clone(),
            method: ColumnMethod::Delta,
            grid_id: grid_id(inc, out),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        match &self.entries {
            Entries::Dense(v) => v[i * self.n_in + j],
            Entries::Sparse(c) => c.row(i).find(|(k, _)| *k == j).map(|(_, v)| v).unwrap_or(0.0),
        }
    }

    /// Nonzero entries of row `i`.
    pub fn row_entries(&self, i: usize) -> Vec<(usize, f64)> {
        match &self.entries {
            Entries::Dense(v) => v[i * self.n_in..(i + 1) * self.n_in]
                .iter()
                .enumerate()
                .filter(|(_, x)| **x != 0.0)
                .map(|(j, x)| (j, *x))
                .collect(),
            Entries::Sparse(c) => c.row(i).collect(),
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        match &self.entries {
            Entries::Dense(v) => v.clone(),
            Entries::Sparse(c) => {
                let mut d = vec![0.0; self.n_out * self.n_in];
                for i in 0..self.n_out {
                    for (j, v) in c.row(i) {
                        d[i * self.n_in + j] += v;
                    }
                }
                d
            }
        }
    }

    /// `A u₊`.
    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        match &self.entries {
            Entries::Dense(v) => par::par_map(self.n_out, |i| {
                v[i * self.n_in..(i + 1) * self.n_in].iter().zip(u).map(|(a, b)| a * b).sum()
            }),
            Entries::Sparse(c) => c.apply_block(u, 1),
        }
    }

    /// `Σ_i μ_i |A[i][j]|` for every column.
    pub fn column_masses(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.n_in];
        match &self.entries {
            Entries::Dense(v) => {
                for i in 0..self.n_out {
                    let row = &v[i * self.n_in..(i + 1) * self.n_in];
                    for (j, a) in row.iter().enumerate() {
                        m[j] += self.mu_out[i] * a.abs();
                    }
                }
            }
            Entries::Sparse(c) => {
                for i in 0..self.n_out {
                    for (j, a) in c.row(i) {
                        m[j] += self.mu_out[i] * a.abs();
                    }
                }
            }
        }
        m
    }

    /// `‖A e_j‖_{L¹(dμ)} / ‖e_j‖_{L¹(dμ)}` for every column.
    pub fn column_norms(&self) -> Vec<f64> {
        self.column_masses().iter().zip(&self.input_norms).map(|(m, n)| m / n).collect()
    }

    /// `L¹ → L¹` operator norm.
    pub fn norm(&self) -> f64 {
        self.column_norms().into_iter().fold(0.0, f64::max)
    }

    fn check_compatible(&self, other: &AlbedoOperator) -> Result<()> {
        if self.n_out != other.n_out || self.n_in != other.n_in || self.grid_id != other.grid_id {
            return Err(Error::Invalid(format!(
                "albedo matrices live on different grids ({} vs {})",
                self.grid_id, other.grid_id
            )));
        }
        if self.method != other.method {
            return Err(Error::Invalid("albedo matrices were probed differently".into()));
        }
        Ok(())
    }

    /// Entrywise `self − other`.
    pub fn difference(&self, other: &AlbedoOperator) -> Result<AlbedoOperator> {
        self.check_compatible(other)?;
        let a = self.to_dense();
        let b = other.to_dense();
        Ok(AlbedoOperator {
            entries: Entries::Dense(a.iter().zip(&b).map(|(x, y)| x - y).collect()),
            ..self.clone()
        })
    }

    /// Entrywise maximum of `|self − other|`.
    pub fn max_abs_difference(&self, other: &AlbedoOperator) -> Result<f64> {
        self.check_compatible(other)?;
        let a = self.to_dense();
        let b = other.to_dense();
        Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
    }

    /// Scale column `j` by `s`.
    pub fn scale_column(&mut self, j: usize, s: f64) {
        let n_in = self.n_in;
        match &mut self.entries {
            Entries::Dense(v) => {
                for i in 0..self.n_out {
                    v[i * n_in + j] *= s;
                }
            }
            Entries::Sparse(c) => {
                for k in 0..c.idx.len() {
                    if c.idx[k] as usize == j {
                        c.val[k] *= s;
                    }
                }
            }
        }
    }
}

/// Identifier of a pair of boundary grids.
pub fn grid_id(inc: &BoundaryGrid, out: &BoundaryGrid) -> String {
    format!("{}|{}", inc.describe(), out.describe())
}

/// `‖A − B‖_{L¹ → L¹}`, exact on the discrete level.
pub fn albedo_opnorm_l1(a: &AlbedoOperator, b: &AlbedoOperator) -> Result<f64> {
    Ok(a.difference(b)?.norm())
}

#[derive(Clone, Copy, Debug)]
pub struct AlbedoOptions {
    pub mode: SolveMode,
    pub ray: RayOptions,
    /// Number of incoming columns solved together.
    pub block: usize,
    /// Solve even when no subcritical condition is detected.
    pub force: bool,
}

impl Default for AlbedoOptions {
    fn default() -> Self {
        AlbedoOptions { mode: SolveMode::Direct, ray: RayOptions::default(), block: 64, force: false }
    }
}

#[derive(Clone, Debug)]
pub struct AlbedoReport {
    pub subcritical: Option<SubcriticalReport>,
    pub solve: Option<SolveReport>,
    pub nnz: usize,
}

/// Ballistic operator `A₁` (the albedo of `(a, 0)`), stored sparsely.
pub fn ballistic_albedo(
    sys: &MagneticSystem,
    a: &Attenuation,
    inc: &BoundaryGrid,
    out: &BoundaryGrid,
    ray: RayOptions,
) -> Result<AlbedoOperator> {
    check_sides(inc, out)?;
    let rays = RayTable::build(sys, a, None, inc, &out.nodes, RayOptions { forward: false, ..ray })?;
    Ok(ballistic_from_rays(&rays, inc, out))
}

fn ballistic_from_rays(rays: &RayTable, inc: &BoundaryGrid, out: &BoundaryGrid) -> AlbedoOperator {
    let mut j = rays.j.clone();
    for q in 0..rays.len() {
        for k in j.ptr[q]..j.ptr[q + 1] {
            j.val[k] *= rays.e_total[q];
        }
    }
    AlbedoOperator {
        n_out: out.len(),
        n_in: inc.len(),
        entries: Entries::Sparse(j),
        mu_out: out.weights.clone(),
        input_norms: inc.weights.clone(),
        method: ColumnMethod::Delta,
        grid_id: grid_id(inc, out),
    }
}

fn check_sides(inc: &BoundaryGrid, out: &BoundaryGrid) -> Result<()> {
    if inc.side != Side::Incoming || out.side != Side::Outgoing {
        return Err(Error::Invalid("albedo maps incoming to outgoing grids".into()));
    }
    Ok(())
}

/// Identity columns `j0..j0+b` pushed through `J` at the grid nodes.
fn j_block(tr: &Transport, j0: usize, b: usize) -> Vec<f64> {
    let n = tr.len();
    let mut out = vec![0.0; n * b];
    par::par_chunks_mut(&mut out, b, |q, o| {
        for (j, w) in tr.rays.j.row(q) {
            if j >= j0 && j < j0 + b {
                o[j - j0] += tr.rays.e_total[q] * w;
            }
        }
    });
    out
}

fn scatter_block(dense: &mut [f64], n_in: usize, block: &[f64], j0: usize, b: usize) {
    let n_out = dense.len() / n_in;
    for i in 0..n_out {
        for c in 0..b {
            dense[i * n_in + j0 + c] += block[i * b + c];
        }
    }
}

/// Build the albedo matrix by forward solves on the nodal basis.
///
/// Without scattering the operator is ballistic and no phase-space grid is needed.
pub fn build_albedo(
    sys: &MagneticSystem,
    pair: &AdmissiblePair,
    grid: Option<&SphereBundleGrid>,
    inc: &BoundaryGrid,
    out: &BoundaryGrid,
    opts: &AlbedoOptions,
) -> Result<(AlbedoOperator, AlbedoReport)> {
    check_sides(inc, out)?;
    if pair.k.is_zero() {
        let a = ballistic_albedo(sys, &pair.a, inc, out, opts.ray)?;
        let nnz = match &a.entries {
            Entries::Sparse(c) => c.nnz(),
            Entries::Dense(v) => v.len(),
        };
        return Ok((a, AlbedoReport { subcritical: None, solve: None, nnz }));
    }
    let grid = grid.ok_or_else(|| Error::Invalid("scattering albedo needs a phase-space grid".into()))?;
    let tr = Transport::new(sys, pair, grid, inc, opts.ray)?;
    let fine = FiberGrid::new(
        sys.dim,
        &grid.fiber.axes.iter().map(|a| a.len() * 4).collect::<Vec<_>>(),
    )?;
    let sub = tr.subcritical(&fine);
    let rays_out = tr.outgoing_rays(out)?;
    let (n_in, n_out) = (inc.len(), out.len());
    let mut dense = vec![0.0; n_out * n_in];
    let mut worst: Option<SolveReport> = None;
    let b = opts.block.max(1);
    let direct = if opts.mode == SolveMode::Direct {
        if !sub.cond1 && !sub.cond2 && !opts.force {
            return Err(Error::Refused("neither subcritical condition holds".into()));
        }
        let mut m = tr.dense_k()?;
        for i in 0..tr.len() {
            m[(i, i)] += 1.0;
        }
        Some(m.lu())
    } else {
        None
    };
    let mut j0 = 0;
    while j0 < n_in {
        let bw = b.min(n_in - j0);
        let rhs = j_block(&tr, j0, bw);
        let (u, rep) = match &direct {
            Some(lu) => {
                let n = tr.len();
                let r = nalgebra::DMatrix::from_fn(n, bw, |q, c| rhs[q * bw + c]);
                let x = lu.solve(&r).ok_or_else(|| Error::Singular("Id + K is singular".into()))?;
                let mut u = vec![0.0; n * bw];
                for q in 0..n {
                    for c in 0..bw {
                        u[q * bw + c] = x[(q, c)];
                    }
                }
                let residual = tr.residual_block(&u, &rhs, bw);
                (u, SolveReport { mode: SolveMode::Direct, terms: 1, residual })
            }
            None => tr.solve_block(&rhs, bw, SolveMode::Neumann, &sub, opts.force)?,
        };
        let mut probe = vec![0.0; n_in * bw];
        for c in 0..bw {
            probe[(j0 + c) * bw + c] = 1.0;
        }
        let col = tr.outgoing_block(&rays_out, &probe, &u, bw);
        scatter_block(&mut dense, n_in, &col, j0, bw);
        worst = Some(match worst {
            Some(w) if w.residual >= rep.residual && w.terms >= rep.terms => w,
            Some(w) => SolveReport { mode: rep.mode, terms: w.terms.max(rep.terms), residual: w.residual.max(rep.residual) },
            None => rep,
        });
        j0 += bw;
    }
    let nnz = dense.len();
    Ok((
        AlbedoOperator::dense(n_out, n_in, dense, inc, out),
        AlbedoReport { subcritical: Some(sub), solve: worst, nnz },
    ))
}

/// Re-probe an albedo matrix with unit-mass mollified columns `w_ε` centered at every node.
pub fn mollified_columns(sys: &MagneticSystem, a: &AlbedoOperator, inc: &BoundaryGrid, eps: f64) -> Result<AlbedoOperator> {
    let dense = a.to_dense();
    let cols: Vec<Result<Vec<(usize, f64)>>> = par::par_map(inc.len(), |j| {
        let w = crate::phase_space::delta_family_w(sys, inc, eps, &inc.nodes[j])?;
        Ok(w.values.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(k, v)| (k, *v)).collect())
    });
    let mut out = vec![0.0; a.n_out * a.n_in];
    for (j, c) in cols.into_iter().enumerate() {
        let c = c?;
        for i in 0..a.n_out {
            let row = &dense[i * a.n_in..(i + 1) * a.n_in];
            out[i * a.n_in + j] = c.iter().map(|(k, v)| row[*k] * v).sum();
        }
    }
    Ok(AlbedoOperator {
        entries: Entries::Dense(out),
        input_norms: vec![1.0; a.n_in],
        method: ColumnMethod::Mollified(eps),
        ..a.clone()
    })
}

/// `α₁` data for an incoming phase point: the forward exit and `E(x′, ξ′, 0, τ₊)`.
pub fn kernel_alpha1(sys: &MagneticSystem, a: &Attenuation, p: &PhasePoint, spacing: f64) -> Result<(PhasePoint, f64)> {
    let (tp, exit) = sys.exit(p, 1.0)?;
    let w = crate::transport::attenuation_e(sys, a, p, 0.0, tp, spacing)?;
    Ok((exit, w))
}

/// A traced half-geodesic with cumulative attenuation for fast `E` lookups.
#[derive(Clone, Debug)]
pub struct AttenuatedPath {
    pub path: GeodesicPath,
    t0: f64,
    dt: f64,
    /// `∫_{t0}^{t_l} a` at equally spaced times.
    cumulative: Vec<f64>,
    /// Polyline for crossing searches.
    pub poly: Vec<(f64, Vec3)>,
}

impl AttenuatedPath {
    pub fn new(sys: &MagneticSystem, a: &Attenuation, p: &PhasePoint, dir: f64, spacing: f64) -> Result<Self> {
        let path = sys.trace_half(p, dir)?;
        let (t0, t1) = (path.tau_minus, path.tau_plus);
        let m = simpson_panels(t1 - t0, spacing);
        let dt = (t1 - t0) / m as f64;
        let phases: Vec<PhasePoint> = (0..=m).map(|l| path.phase_at(sys, t0 + dt * l as f64)).collect();
        let cumulative = if a.is_zero() {
            vec![0.0; m + 1]
        } else {
            let av: Vec<f64> = phases.iter().map(|q| a.at(sys, q)).collect();
            let tail = cumulative_tail(&av, dt);
            tail.iter().map(|t| tail[0] - t).collect()
        };
        let poly = phases.iter().enumerate().map(|(l, q)| (t0 + dt * l as f64, q.x)).collect();
        Ok(AttenuatedPath { path, t0, dt, cumulative, poly })
    }

    fn integral_to(&self, t: f64) -> f64 {
        let u = ((t - self.t0) / self.dt).clamp(0.0, (self.cumulative.len() - 1) as f64);
        let i = (u.floor() as usize).min(self.cumulative.len() - 2);
        let f = u - i as f64;
        self.cumulative[i] * (1.0 - f) + self.cumulative[i + 1] * f
    }

    /// `exp(−∫_s^t a)` along this path.
    pub fn e(&self, s: f64, t: f64) -> f64 {
        (-(self.integral_to(t) - self.integral_to(s))).exp()
    }
}

/// One transversal crossing of an incoming forward geodesic with an outgoing backward one.
#[derive(Clone, Copy, Debug)]
pub struct Crossing {
    pub point: Vec3,
    /// Time along the incoming geodesic (`0 ≤ r ≤ τ₊`).
    pub r: f64,
    /// Time along the outgoing geodesic (`τ₋ ≤ s ≤ 0`).
    pub s: f64,
    pub sin_angle: f64,
    pub value: f64,
    pub unreliable: bool,
}

fn segment_candidates(a: &[(f64, Vec3)], b: &[(f64, Vec3)]) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for i in 0..a.len() - 1 {
        let (p0, p1) = (a[i].1, a[i + 1].1);
        let d = p1 - p0;
        for j in 0..b.len() - 1 {
            let (q0, q1) = (b[j].1, b[j + 1].1);
            let e = q1 - q0;
            let lo = Vec3::new(p0[0].min(p1[0]), p0[1].min(p1[1]), 0.0);
            let hi = Vec3::new(p0[0].max(p1[0]), p0[1].max(p1[1]), 0.0);
            let pad = 0.25 * (d.norm() + e.norm());
            if q0[0].max(q1[0]) < lo[0] - pad
                || q0[0].min(q1[0]) > hi[0] + pad
                || q0[1].max(q1[1]) < lo[1] - pad
                || q0[1].min(q1[1]) > hi[1] + pad
            {
                continue;
            }
            let den = d[0] * e[1] - d[1] * e[0];
            if den.abs() < 1e-14 {
                continue;
            }
            let w = q0 - p0;
            let u = (w[0] * e[1] - w[1] * e[0]) / den;
            let v = (w[0] * d[1] - w[1] * d[0]) / den;
            if (-0.25..=1.25).contains(&u) && (-0.25..=1.25).contains(&v) {
                out.push((a[i].0 + u * (a[i + 1].0 - a[i].0), b[j].0 + v * (b[j + 1].0 - b[j].0)));
            }
        }
    }
    out
}

/// Crossings contributing to `α₂` in the plane, each refined by Newton on `(r, s)`.
pub fn alpha2_crossings(
    sys: &MagneticSystem,
    pair: &AdmissiblePair,
    incoming: &AttenuatedPath,
    outgoing: &AttenuatedPath,
) -> Result<Vec<Crossing>> {
    if sys.dim != 2 {
        return Err(Error::Invalid("pointwise α₂ is defined for planar systems".into()));
    }
    let mut found: Vec<Crossing> = Vec::new();
    for (r0, s0) in segment_candidates(&incoming.poly, &outgoing.poly) {
        let (mut r, mut s) = (r0, s0);
        let mut ok = false;
        for _ in 0..30 {
            let p = incoming.path.phase_at(sys, r);
            let q = outgoing.path.phase_at(sys, s);
            let f = p.x - q.x;
            if f.norm() < 1e-12 {
                ok = true;
                break;
            }
            // Jacobian columns: d/dr = ξ_p, d/ds = −ξ_q
            let (a, b, c, d) = (p.xi[0], -q.xi[0], p.xi[1], -q.xi[1]);
            let det = a * d - b * c;
            if det.abs() < 1e-14 {
                break;
            }
            r -= (d * f[0] - b * f[1]) / det;
            s -= (-c * f[0] + a * f[1]) / det;
            r = r.clamp(incoming.path.tau_minus, incoming.path.tau_plus);
            s = s.clamp(outgoing.path.tau_minus, outgoing.path.tau_plus);
        }
        if !ok {
            let p = incoming.path.phase_at(sys, r);
            let q = outgoing.path.phase_at(sys, s);
            if (p.x - q.x).norm() > 1e-9 {
                continue;
            }
        }
        if found.iter().any(|c| (c.r - r).abs() < 1e-6 && (c.s - s).abs() < 1e-6) {
            continue;
        }
        let p = incoming.path.phase_at(sys, r);
        let q = outgoing.path.phase_at(sys, s);
        let cp = sys.c(&p.x).sqrt();
        let (ep, eq) = (p.xi * cp, q.xi * cp);
        let sin = (ep[0] * eq[1] - ep[1] * eq[0]).abs();
        let k = pair.k.eval(&p.x, &ep, &eq);
        let e = incoming.e(0.0, r) * outgoing.e(s, 0.0);
        let value = if sin > 0.0 { e * k / sin } else { 0.0 };
        found.push(Crossing { point: p.x, r, s, sin_angle: sin, value, unreliable: sin < 1e-3 });
    }
    Ok(found)
}

/// `α₂(x̂, ξ̂, x′, ξ′)` by crossing resolution, with an unreliability flag.
pub fn kernel_alpha2(
    sys: &MagneticSystem,
    pair: &AdmissiblePair,
    out_point: &PhasePoint,
    in_point: &PhasePoint,
    spacing: f64,
) -> Result<(f64, bool)> {
    if pair.k.is_zero() {
        return Ok((0.0, false));
    }
    let inc = AttenuatedPath::new(sys, &pair.a, in_point, 1.0, spacing)?;
    let out = AttenuatedPath::new(sys, &pair.a, out_point, -1.0, spacing)?;
    let cs = alpha2_crossings(sys, pair, &inc, &out)?;
    Ok((cs.iter().map(|c| c.value).sum(), cs.iter().any(|c| c.unreliable)))
}

/// Closed-form `α₂` evaluated node by node, times the incoming `dμ` weights.
pub fn alpha2_matrix(
    sys: &MagneticSystem,
    pair: &AdmissiblePair,
    inc: &BoundaryGrid,
    out: &BoundaryGrid,
    spacing: f64,
) -> Result<(AlbedoOperator, usize)> {
    let ins: Vec<Result<AttenuatedPath>> =
        par::par_map_slice(&inc.nodes, |p| AttenuatedPath::new(sys, &pair.a, p, 1.0, spacing));
    let ins: Vec<AttenuatedPath> = ins.into_iter().collect::<Result<_>>()?;
    let outs: Vec<Result<AttenuatedPath>> =
        par::par_map_slice(&out.nodes, |p| AttenuatedPath::new(sys, &pair.a, p, -1.0, spacing));
    let outs: Vec<AttenuatedPath> = outs.into_iter().collect::<Result<_>>()?;
    let rows: Vec<Result<(Vec<f64>, usize)>> = par::par_map(out.len(), |i| {
        let mut row = vec![0.0; inc.len()];
        let mut flagged = 0;
        for j in 0..inc.len() {
            for c in alpha2_crossings(sys, pair, &ins[j], &outs[i])? {
                if c.unreliable {
                    flagged += 1;
                } else {
                    row[j] += c.value * inc.weights[j];
                }
            }
        }
        Ok((row, flagged))
    });
    let mut dense = Vec::with_capacity(out.len() * inc.len());
    let mut flagged = 0;
    for r in rows {
        let (row, f) = r?;
        dense.extend(row);
        flagged += f;
    }
    Ok((AlbedoOperator::dense(out.len(), inc.len(), dense, inc, out), flagged))
}

/// The split `A = A₁ + A₂ + A₃` on the discrete level.
#[derive(Clone, Debug)]
pub struct KernelDecomposition {
    pub a1: AlbedoOperator,
    /// Single scattering of the discrete solver, `−T₀⁻¹T₁J` restricted to `∂₋SM`.
    pub a2: AlbedoOperator,
    pub a3: AlbedoOperator,
    pub a3_column_norms: Vec<f64>,
    pub a3_sup: f64,
}

/// Split a scattering albedo into ballistic, single and multiple scattering parts.
pub fn decompose_kernel(
    a: &AlbedoOperator,
    sys: &MagneticSystem,
    pair: &AdmissiblePair,
    grid: Option<&SphereBundleGrid>,
    inc: &BoundaryGrid,
    out: &BoundaryGrid,
    ray: RayOptions,
) -> Result<KernelDecomposition> {
    let a1 = ballistic_albedo(sys, &pair.a, inc, out, ray)?;
    let (n_out, n_in) = (out.len(), inc.len());
    let a2 = if pair.k.is_zero() {
        AlbedoOperator::dense(n_out, n_in, vec![0.0; n_out * n_in], inc, out)
    } else {
        let grid = grid.ok_or_else(|| Error::Invalid("scattering decomposition needs a phase-space grid".into()))?;
        let tr = Transport::new(sys, pair, grid, inc, ray)?;
        let rays_out = tr.outgoing_rays(out)?;
        let mut dense = vec![0.0; n_out * n_in];
        let b = 64;
        let mut j0 = 0;
        while j0 < n_in {
            let bw = b.min(n_in - j0);
            let rhs = j_block(&tr, j0, bw);
            let s = rays_out.t0inv.apply_block(&tr.t1.apply_block(&rhs, bw), bw);
            let neg: Vec<f64> = s.iter().map(|v| -v).collect();
            scatter_block(&mut dense, n_in, &neg, j0, bw);
            j0 += bw;
        }
        AlbedoOperator::dense(n_out, n_in, dense, inc, out)
    };
    let a3 = a.difference(&a1)?.difference(&a2)?;
    let a3_column_norms = a3.column_norms();
    let a3_sup = a3_column_norms.iter().cloned().fold(0.0, f64::max);
    Ok(KernelDecomposition { a1, a2, a3, a3_column_norms, a3_sup })
}

/// Quadrature sizes for probe responses.
#[derive(Clone, Copy, Debug)]
pub struct ProbeQuadrature {
    /// Gauss nodes along the outgoing geodesic.
    pub s_nodes: usize,
    /// Gauss rings in the polar angle of the direction cap.
    pub cap_rings: usize,
    pub cap_azimuths: usize,
    /// Gauss nodes per side of the boundary patch used for the probe mass.
    pub patch_nodes: usize,
}

impl Default for ProbeQuadrature {
    fn default() -> Self {
        ProbeQuadrature { s_nodes: 8, cap_rings: 4, cap_azimuths: 8, patch_nodes: 10 }
    }
}

/// Outgoing reading `(A g)(x̂, ξ̂)` for the localized probe `g = ψ_ε χ_δ φ_ρ`, split by collision order.
#[derive(Clone, Copy, Debug, Default)]
pub struct ProbeResponse {
    pub ballistic: f64,
    pub single: f64,
    pub multiple: f64,
    /// `‖g‖_{L¹(dμ)}`, only computed when multiple scattering is modelled.
    pub probe_mass: f64,
    pub total: f64,
}

struct Background<'a> {
    tr: Transport<'a>,
    sub: SubcriticalReport,
    inc: &'a BoundaryGrid,
    out: &'a BoundaryGrid,
    rays_out: RayTable,
}

/// Forward model for localized incoming probes in three dimensions.
///
/// The first-collision part is integrated directly along the outgoing
/// geodesic over the direction cap where the probe lives. Higher collision
/// orders are smooth and are read from a coarse grid solve.
pub struct AlbedoProbe<'a> {
    pub sys: &'a MagneticSystem,
    pub pair: &'a AdmissiblePair,
    pub spacing: f64,
    pub quad: ProbeQuadrature,
    background: Option<Background<'a>>,
}

impl<'a> AlbedoProbe<'a> {
    pub fn new(sys: &'a MagneticSystem, pair: &'a AdmissiblePair, spacing: f64, quad: ProbeQuadrature) -> Result<Self> {
        if sys.dim != 3 {
            return Err(Error::Invalid("localized probes are defined in three dimensions".into()));
        }
        Ok(AlbedoProbe { sys, pair, spacing, quad, background: None })
    }

    /// Model collisions beyond the first on a coarse phase-space grid.
    pub fn with_background(
        mut self,
        grid: &'a SphereBundleGrid,
        inc: &'a BoundaryGrid,
        out: &'a BoundaryGrid,
        ray: RayOptions,
    ) -> Result<Self> {
        if self.pair.k.is_zero() {
            return Ok(self);
        }
        let tr = Transport::new(self.sys, self.pair, grid, inc, ray)?;
        let fine = FiberGrid::new(3, &grid.fiber.axes.iter().map(|a| a.len() * 2).collect::<Vec<_>>())?;
        let sub = tr.subcritical(&fine);
        let rays_out = tr.outgoing_rays(out)?;
        self.background = Some(Background { tr, sub, inc, out, rays_out });
        Ok(self)
    }

    fn e_along(&self, p: &PhasePoint, s: f64, t: f64) -> Result<f64> {
        crate::transport::attenuation_e(self.sys, &self.pair.a, p, s, t, self.spacing)
    }

    /// `s` with `h₂(h(s)) = target`, by secant iteration from the linearization.
    fn s_for_h2(&self, frame: &ScatterFrame, target: f64, limit: (f64, f64)) -> Result<f64> {
        let h2 = |s: f64| -> Result<f64> { frame.h2(self.sys, &frame.h_curve(self.sys, s)?.x) };
        let (mut s0, mut f0) = (0.0, -target);
        let mut s1 = (target / frame.eta_star_norm2).clamp(limit.0, limit.1);
        let mut f1 = h2(s1)? - target;
        for _ in 0..30 {
            if f1.abs() < 1e-10 * target.abs().max(1e-12) || f1 == f0 {
                break;
            }
            let s2 = (s1 - f1 * (s1 - s0) / (f1 - f0)).clamp(limit.0, limit.1);
            s0 = s1;
            f0 = f1;
            s1 = s2;
            f1 = h2(s1)? - target;
        }
        Ok(s1)
    }

    /// Response to the probe built from `frame` with widths `(ε, ρ, δ)`.
    pub fn respond(&self, frame: &ScatterFrame, eps: f64, rho: f64, delta: f64) -> Result<ProbeResponse> {
        if !(eps > 0.0 && rho > 0.0 && delta > 0.0) {
            return Err(Error::Invalid("probe widths must be positive".into()));
        }
        let sys = self.sys;
        let start = PhasePoint { x: frame.y, xi: frame.eta_out };
        let (tm, tp) = sys.exit_times(&start)?;
        let euclid = |x: &Vec3, v: &Vec3| (v * sys.c(x).sqrt()).normalize();

        // zeroth order: the probe seen along the outgoing geodesic itself
        let (_, entry) = sys.exit(&start, -1.0)?;
        let dir0 = FiberMollifier::new(3, euclid(&frame.y, &frame.eta_in), eps).eval(&euclid(&frame.y, &frame.eta_out));
        let ballistic = if dir0 == 0.0 {
            0.0
        } else {
            dir0 * frame.chi_delta(sys, delta, &entry.x)? * frame.phi_rho(sys, rho, &entry.x)? * self.e_along(&start, tm, tp)?
        };

        let mut single = 0.0;
        if !self.pair.k.is_zero() {
            let s_lo = self.s_for_h2(frame, -delta, (tm, tp))?;
            let s_hi = self.s_for_h2(frame, delta, (tm, tp))?;
            let (s_lo, s_hi) = (s_lo.min(s_hi), s_lo.max(s_hi));
            let (sn, sw) = gauss_legendre(self.quad.s_nodes, s_lo, s_hi);
            let tmax = if eps >= 2.0 { std::f64::consts::PI } else { 2.0 * (eps / 2.0).asin() };
            let (th, thw) = gauss_legendre(self.quad.cap_rings, 0.0, tmax);
            let na = self.quad.cap_azimuths;
            let terms: Vec<Result<f64>> = par::par_map(sn.len(), |q| {
                let s = sn[q];
                let ys = sys.flow(&start, s);
                let b = sys.transport_along(&start, &frame.eta_in, s);
                let eb = euclid(&ys.x, &b);
                let out_dir = euclid(&ys.x, &ys.xi);
                let moll = FiberMollifier::new(3, eb, eps);
                let (u1, u2) = tangent_frame(3, &eb);
                let e_out = self.e_along(&start, s, tp)?;
                let mut inner = 0.0;
                let mut norm = 0.0;
                for (t, wt) in th.iter().zip(&thw) {
                    for m in 0..na {
                        let phi = 2.0 * std::f64::consts::PI * (m as f64 + 0.5) / na as f64;
                        let e = t.cos() * eb + t.sin() * (phi.cos() * u1 + phi.sin() * u2);
                        let w = wt * t.sin() * 2.0 * std::f64::consts::PI / na as f64 * moll.eval(&e);
                        if w == 0.0 {
                            continue;
                        }
                        norm += w;
                        let here = PhasePoint { x: ys.x, xi: e / sys.c(&ys.x).sqrt() };
                        let (t_in, xp) = sys.exit(&here, -1.0)?;
                        let chi = frame.chi_delta(sys, delta, &xp.x)?;
                        if chi == 0.0 {
                            continue;
                        }
                        let phi_r = frame.phi_rho(sys, rho, &xp.x)?;
                        let e_in = self.e_along(&here, t_in, 0.0)?;
                        inner += w * chi * phi_r * e_in * self.pair.k.eval(&ys.x, &e, &out_dir);
                    }
                }
                // the cap quadrature is renormalized to the exact unit mass of ψ_ε
                let inner = if norm > 0.0 { inner / norm } else { 0.0 };
                Ok(sw[q] * e_out * inner)
            });
            for t in terms {
                single += t?;
            }
        }

        let (multiple, probe_mass) = match &self.background {
            Some(bg) => {
                let mass = self.probe_mass(frame, rho, delta)?;
                let (_, exit) = sys.exit(&start, 1.0)?;
                (self.multiple_kernel(bg, frame, &exit)? * mass, mass)
            }
            None => (0.0, 0.0),
        };
        Ok(ProbeResponse { ballistic, single, multiple, probe_mass, total: ballistic + single + multiple })
    }

    /// `α₃(x̂, ξ̂; x*, ξ*)` from one grid column.
    fn multiple_kernel(&self, bg: &Background, frame: &ScatterFrame, exit: &PhasePoint) -> Result<f64> {
        let st = bg.inc.stencil(self.sys, &frame.x_star);
        let mut u_plus = vec![0.0; bg.inc.len()];
        for (j, w) in st.iter() {
            u_plus[j] += w / bg.inc.weights[j];
        }
        let rhs = bg.tr.rays.apply_j_block(&u_plus, 1);
        let mode = if bg.sub.cond1 { SolveMode::Neumann } else { SolveMode::Direct };
        let (u, _) = bg.tr.solve_block(&rhs, 1, mode, &bg.sub, false)?;
        let full = bg.tr.outgoing_block(&bg.rays_out, &u_plus, &u, 1);
        let single = bg.rays_out.t0inv.apply_block(&bg.tr.t1.apply_block(&rhs, 1), 1);
        let ball = bg.rays_out.apply_j_block(&u_plus, 1);
        let a3: Vec<f64> = full.iter().zip(&single).zip(&ball).map(|((f, s), b)| f + s - b).collect();
        Ok(bg.out.stencil(self.sys, exit).apply(&a3))
    }

    /// `‖g‖_{L¹(dμ)}` on a boundary patch around `x*`, with the direction factor integrated to one.
    fn probe_mass(&self, frame: &ScatterFrame, rho: f64, delta: f64) -> Result<f64> {
        let sys = self.sys;
        let xs = frame.x_star.x;
        let t1 = (frame.eta_star - frame.eta_star.dot(&xs) * xs).normalize();
        let t2 = xs.cross(&t1);
        let at = |u: f64, v: f64| (xs + u * t1 + v * t2).normalize();
        // patch half-widths from the supports of χ_δ and φ_ρ
        let edge = |f: &dyn Fn(f64) -> Result<f64>| -> Result<f64> {
            let mut hi = 0.05;
            while f(hi)? > 0.0 && hi < 1.0 {
                hi *= 1.5;
            }
            let mut lo = 0.0;
            for _ in 0..30 {
                let mid = 0.5 * (lo + hi);
                if f(mid)? > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            Ok(hi)
        };
        let chi_u = |u: f64| frame.chi_delta(sys, delta, &at(u, 0.0));
        let phi_v = |v: f64| frame.phi_rho(sys, rho, &at(0.0, v));
        let u_hi = edge(&chi_u)?;
        let u_lo = edge(&|u: f64| chi_u(-u))?;
        let v_hi = 1.5 * edge(&phi_v)?;
        let v_lo = 1.5 * edge(&|v: f64| phi_v(-v))?;
        let n = self.quad.patch_nodes;
        let (us, uw) = gauss_legendre(n, -1.2 * u_lo, 1.2 * u_hi);
        let (vs, vw) = gauss_legendre(n, -v_lo, v_hi);
        let e_star = (frame.x_star.xi * sys.c(&xs).sqrt()).normalize();
        let cosine = xs.dot(&e_star).abs();
        let rows: Vec<Result<f64>> = par::par_map(n, |i| {
            let mut acc = 0.0;
            for (v, wv) in vs.iter().zip(&vw) {
                let x = at(us[i], *v);
                let chi = frame.chi_delta(sys, delta, &x)?;
                if chi == 0.0 {
                    continue;
                }
                let jac = (1.0 + us[i] * us[i] + v * v).powf(-1.5) * sys.c(&x);
                acc += wv * chi * frame.phi_rho(sys, rho, &x)? * jac;
            }
            Ok(uw[i] * acc)
        });
        let mut total = 0.0;
        for r in rows {
            total += r?;
        }
        Ok(cosine * total)
    }
}

/// Limit value `E(x̂ side) E(x* side) k(y, η′, η)` of the probe pairing, from known coefficients.
pub fn scattering_limit(sys: &MagneticSystem, pair: &AdmissiblePair, frame: &ScatterFrame, spacing: f64) -> Result<f64> {
    let out = PhasePoint { x: frame.y, xi: frame.eta_out };
    let (_, tp) = sys.exit_times(&out)?;
    let inc = PhasePoint { x: frame.y, xi: frame.eta_in };
    let e1 = crate::transport::attenuation_e(sys, &pair.a, &out, 0.0, tp, spacing)?;
    let e2 = crate::transport::attenuation_e(sys, &pair.a, &inc, frame.tau_in, 0.0, spacing)?;
    let c = sys.c(&frame.y).sqrt();
    let k = pair.k.eval(&frame.y, &(frame.eta_in * c), &(frame.eta_out * c));
    Ok(e1 * e2 * k)
}
