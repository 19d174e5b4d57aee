//! Coefficient pairs, the transport operators `J`, `T₀⁻¹`, `T₁`, `K` on a
//! sphere-bundle grid, and the forward solvers for `(Id + K) u = J u₊`.
//!
//! Phase-space vectors are stored node-major with a column block width `B`:
//! entry `(q, c)` of a block lives at `q * B + c`. Coefficient callbacks take
//! the position and the direction normalized in the Euclidean sense, which
//! for a conformal metric is the g-orthonormal frame representation.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::geometry::{MagneticSystem, PhasePoint, Vec3};
use crate::par;
use crate::phase_space::{BoundaryFlux, BoundaryGrid, FiberGrid, SphereBundleGrid};
use crate::quadrature::{cumulative_tail, simpson_panels, simpson_weights};

pub type PhaseFn = Arc<dyn Fn(&Vec3, &Vec3) -> f64 + Send + Sync>;
pub type KernelFn = Arc<dyn Fn(&Vec3, &Vec3, &Vec3) -> f64 + Send + Sync>;

/// Values of a function on the nodes of a [`SphereBundleGrid`].
pub type PhaseField = Vec<f64>;

/// Attenuation `a(x, ξ)`.
#[derive(Clone)]
pub struct Attenuation {
    f: PhaseFn,
    zero: bool,
    isotropic: bool,
}

impl std::fmt::Debug for Attenuation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Attenuation {{ zero: {}, isotropic: {} }}", self.zero, self.isotropic)
    }
}

impl Attenuation {
    pub fn zero() -> Self {
        Attenuation { f: Arc::new(|_, _| 0.0), zero: true, isotropic: true }
    }

    pub fn isotropic(f: impl Fn(&Vec3) -> f64 + Send + Sync + 'static) -> Self {
        Attenuation { f: Arc::new(move |x, _| f(x)), zero: false, isotropic: true }
    }

    pub fn from_fn(f: impl Fn(&Vec3, &Vec3) -> f64 + Send + Sync + 'static) -> Self {
        Attenuation { f: Arc::new(f), zero: false, isotropic: false }
    }

    pub fn is_zero(&self) -> bool {
        self.zero
    }

    pub fn is_isotropic(&self) -> bool {
        self.isotropic
    }

    /// Value at `x` for the Euclidean unit direction `e`.
    #[inline]
    pub fn eval(&self, x: &Vec3, e: &Vec3) -> f64 {
        if self.zero {
            0.0
        } else {
            (self.f)(x, e)
        }
    }

    /// Value at a phase point (g-unit direction).
    pub fn at(&self, sys: &MagneticSystem, p: &PhasePoint) -> f64 {
        if self.zero {
            return 0.0;
        }
        self.eval(&p.x, &(p.xi * sys.c(&p.x).sqrt()))
    }
}

/// Scattering kernel `k(x, η, ξ)`: rate of redirection from `η` into `ξ`.
#[derive(Clone)]
pub struct ScatteringKernel {
    f: KernelFn,
    zero: bool,
    /// Set when `k` depends on `x` only.
    direction_free: bool,
}

impl std::fmt::Debug for ScatteringKernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ScatteringKernel {{ zero: {}, direction_free: {} }}", self.zero, self.direction_free)
    }
}

impl ScatteringKernel {
    pub fn zero() -> Self {
        ScatteringKernel { f: Arc::new(|_, _, _| 0.0), zero: true, direction_free: true }
    }

    pub fn isotropic(f: impl Fn(&Vec3) -> f64 + Send + Sync + 'static) -> Self {
        ScatteringKernel { f: Arc::new(move |x, _, _| f(x)), zero: false, direction_free: true }
    }

    pub fn from_fn(f: impl Fn(&Vec3, &Vec3, &Vec3) -> f64 + Send + Sync + 'static) -> Self {
        ScatteringKernel { f: Arc::new(f), zero: false, direction_free: false }
    }

    pub fn is_zero(&self) -> bool {
        self.zero
    }

    pub fn is_direction_free(&self) -> bool {
        self.direction_free
    }

    #[inline]
    pub fn eval(&self, x: &Vec3, eta: &Vec3, xi: &Vec3) -> f64 {
        if self.zero {
            0.0
        } else {
            (self.f)(x, eta, xi)
        }
    }

    /// `σ_p(x, η) = ∫ k(x, η, ξ) dσ_x(ξ)` on the given fiber quadrature.
    pub fn sigma_p(&self, x: &Vec3, eta: &Vec3, fiber: &FiberGrid) -> f64 {
        if self.zero {
            return 0.0;
        }
        fiber.dirs.iter().zip(&fiber.weights).map(|(e, w)| w * self.eval(x, eta, e)).sum()
    }
}

/// An attenuation and scattering pair, supported in the ball of radius `support_radius`.
#[derive(Clone, Debug)]
pub struct AdmissiblePair {
    pub a: Attenuation,
    pub k: ScatteringKernel,
    pub support_radius: f64,
}

impl AdmissiblePair {
    pub fn new(a: Attenuation, k: ScatteringKernel, support_radius: f64) -> Self {
        AdmissiblePair { a, k, support_radius }
    }

    pub fn vacuum() -> Self {
        AdmissiblePair::new(Attenuation::zero(), ScatteringKernel::zero(), 1.0)
    }

    /// Sampled admissibility: `a, k ≥ 0`, finite, and zero outside the support ball.
    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.support_radius > 0.0 && self.support_radius <= 1.0) {
            return Err(Error::Invalid("support radius must lie in (0, 1]".into()));
        }
        let pts = crate::geometry::sphere_points(dim, 64);
        let dirs = crate::geometry::sphere_points(dim, 16);
        for r in [0.0, 0.3, 0.6, 0.9, 0.97, 1.0] {
            for p in &pts {
                let x = r * p;
                let outside = r > self.support_radius;
                for (i, e) in dirs.iter().enumerate() {
                    let a = self.a.eval(&x, e);
                    let k = self.k.eval(&x, e, &dirs[(i + 5) % dirs.len()]);
                    if !a.is_finite() || !k.is_finite() || a < 0.0 || k < 0.0 {
                        return Err(Error::Invalid(format!("coefficients negative or non-finite at {x:?}")));
                    }
                    if outside && (a != 0.0 || k != 0.0) {
                        return Err(Error::Invalid(format!(
                            "coefficients do not vanish outside radius {}",
                            self.support_radius
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// `E(p, s, t) = exp(−∫_s^t a(φ_r p) dr)` by composite Simpson along the traced geodesic.
pub fn attenuation_e(sys: &MagneticSystem, a: &Attenuation, p: &PhasePoint, s: f64, t: f64, spacing: f64) -> Result<f64> {
    if a.is_zero() || s == t {
        return Ok(1.0);
    }
    let path = sys.trace(p)?;
    let (lo, hi) = (s.min(t), s.max(t));
    if lo < path.tau_minus - 1e-9 || hi > path.tau_plus + 1e-9 {
        return Err(Error::Invalid(format!(
            "interval [{lo}, {hi}] outside [{}, {}]",
            path.tau_minus, path.tau_plus
        )));
    }
    let m = simpson_panels(hi - lo, spacing);
    let dt = (hi - lo) / m as f64;
    let w = simpson_weights(m, dt);
    let integral: f64 = (0..=m).map(|q| w[q] * a.at(sys, &path.phase_at(sys, lo + dt * q as f64))).sum();
    let integral = if t >= s { integral } else { -integral };
    Ok((-integral).exp())
}

/// Compressed sparse rows.
#[derive(Clone, Debug, Default)]
pub struct Csr {
    pub ptr: Vec<usize>,
    pub idx: Vec<u32>,
    pub val: Vec<f64>,
}

impl Csr {
    fn from_rows(rows: Vec<Vec<(u32, f64)>>) -> Self {
        let mut ptr = Vec::with_capacity(rows.len() + 1);
        ptr.push(0);
        let total: usize = rows.iter().map(|r| r.len()).sum();
        let mut idx = Vec::with_capacity(total);
        let mut val = Vec::with_capacity(total);
        for r in rows {
            for (i, v) in r {
                idx.push(i);
                val.push(v);
            }
            ptr.push(idx.len());
        }
        Csr { ptr, idx, val }
    }

    pub fn rows(&self) -> usize {
        self.ptr.len().saturating_sub(1)
    }

    pub fn nnz(&self) -> usize {
        self.idx.len()
    }

    pub fn row(&self, q: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.ptr[q]..self.ptr[q + 1]).map(move |k| (self.idx[k] as usize, self.val[k]))
    }

    /// `out[q, c] = Σ_m A[q, m] x[m, c]` for blocks of width `b`.
    pub fn apply_block(&self, x: &[f64], b: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.rows() * b];
        par::par_chunks_mut(&mut out, b, |q, o| {
            for (m, v) in self.row(q) {
                let xs = &x[m * b..(m + 1) * b];
                for c in 0..b {
                    o[c] += v * xs[c];
                }
            }
        });
        out
    }

    /// `Aᵀ y` for a single vector; `cols` is the column dimension.
    pub fn apply_transpose(&self, y: &[f64], cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; cols];
        for q in 0..self.rows() {
            for (m, v) in self.row(q) {
                out[m] += v * y[q];
            }
        }
        out
    }
}

fn merge(mut entries: Vec<(u32, f64)>) -> Vec<(u32, f64)> {
    entries.sort_by_key(|e| e.0);
    let mut out: Vec<(u32, f64)> = Vec::with_capacity(entries.len());
    for (i, v) in entries {
        match out.last_mut() {
            Some(last) if last.0 == i => last.1 += v,
            _ => out.push((i, v)),
        }
    }
    out.retain(|e| e.1 != 0.0);
    out
}

/// Options for the per-ray quadrature.
#[derive(Clone, Copy, Debug)]
pub struct RayOptions {
    /// Maximum Simpson spacing along each backward ray.
    pub spacing: f64,
    /// Also trace forward to record `τ₊`.
    pub forward: bool,
}

impl Default for RayOptions {
    fn default() -> Self {
        RayOptions { spacing: 0.04, forward: true }
    }
}

/// Backward-ray data for a list of starting phase points.
#[derive(Clone, Debug)]
pub struct RayTable {
    /// Rows of `T₀⁻¹` into the grid (empty when no grid was given).
    pub t0inv: Csr,
    /// Hat-function weights of the backward exit point in the incoming grid.
    pub j: Csr,
    /// `E(p, τ₋, 0)`.
    pub e_total: Vec<f64>,
    pub tau_minus: Vec<f64>,
    pub tau_plus: Vec<f64>,
    pub exits: Vec<PhasePoint>,
}

struct RayRow {
    t0inv: Vec<(u32, f64)>,
    j: Vec<(u32, f64)>,
    e_total: f64,
    tau_minus: f64,
    tau_plus: f64,
    exit: PhasePoint,
}

impl RayTable {
    pub fn build(
        sys: &MagneticSystem,
        a: &Attenuation,
        grid: Option<&SphereBundleGrid>,
        incoming: &BoundaryGrid,
        starts: &[PhasePoint],
        opts: RayOptions,
    ) -> Result<Self> {
        let rows: Vec<Result<RayRow>> = par::par_map_slice(starts, |p| ray_row(sys, a, grid, incoming, p, opts));
        let mut t0 = Vec::with_capacity(rows.len());
        let mut jj = Vec::with_capacity(rows.len());
        let mut table = RayTable {
            t0inv: Csr::default(),
            j: Csr::default(),
            e_total: Vec::with_capacity(rows.len()),
            tau_minus: Vec::with_capacity(rows.len()),
            tau_plus: Vec::with_capacity(rows.len()),
            exits: Vec::with_capacity(rows.len()),
        };
        for r in rows {
            let r = r?;
            t0.push(r.t0inv);
            jj.push(r.j);
            table.e_total.push(r.e_total);
            table.tau_minus.push(r.tau_minus);
            table.tau_plus.push(r.tau_plus);
            table.exits.push(r.exit);
        }
        table.t0inv = Csr::from_rows(t0);
        table.j = Csr::from_rows(jj);
        Ok(table)
    }

    pub fn len(&self) -> usize {
        self.e_total.len()
    }

    pub fn is_empty(&self) -> bool {
        self.e_total.is_empty()
    }

    /// `(J u₊)` at the starting points for a block of boundary columns.
    pub fn apply_j_block(&self, u_plus: &[f64], b: usize) -> Vec<f64> {
        let mut out = self.j.apply_block(u_plus, b);
        par::par_chunks_mut(&mut out, b, |q, o| {
            for v in o.iter_mut() {
                *v *= self.e_total[q];
            }
        });
        out
    }
}

fn ray_row(
    sys: &MagneticSystem,
    a: &Attenuation,
    grid: Option<&SphereBundleGrid>,
    incoming: &BoundaryGrid,
    p: &PhasePoint,
    opts: RayOptions,
) -> Result<RayRow> {
    let tau_plus = if opts.forward { sys.exit(p, 1.0)?.0 } else { 0.0 };
    let path = sys.trace_half(p, -1.0)?;
    let tm = path.tau_minus;
    let exit = path.exit_minus;
    let j: Vec<(u32, f64)> = incoming.stencil(sys, &exit).iter().map(|(i, w)| (i as u32, w)).collect();
    if tm == 0.0 {
        return Ok(RayRow { t0inv: Vec::new(), j, e_total: 1.0, tau_minus: 0.0, tau_plus, exit });
    }
    let m = simpson_panels(-tm, opts.spacing);
    let dt = -tm / m as f64;
    let phases: Vec<PhasePoint> = (0..=m).map(|l| path.phase_at(sys, tm + dt * l as f64)).collect();
    let e: Vec<f64> = if a.is_zero() {
        vec![1.0; m + 1]
    } else {
        let av: Vec<f64> = phases.iter().map(|q| a.at(sys, q)).collect();
        cumulative_tail(&av, dt).iter().map(|i| (-i).exp()).collect()
    };
    let mut t0inv = Vec::new();
    if let Some(g) = grid {
        let w = simpson_weights(m, dt);
        let mut entries = Vec::with_capacity((m + 1) * 16);
        for l in 0..=m {
            let coef = -w[l] * e[l];
            for (i, sw) in g.stencil(&phases[l]).iter() {
                entries.push((i as u32, coef * sw));
            }
        }
        t0inv = merge(entries);
    }
    Ok(RayRow { t0inv, j, e_total: e[0], tau_minus: tm, tau_plus, exit })
}

#[derive(Clone, Debug)]
enum Block {
    Zero,
    /// `k` depends on `x` only: `M[i][j] = k(x) w_j`.
    Uniform(f64),
    /// Row-major `M[i][j] = k(x, e_j, e_i) w_j`.
    Dense(Vec<f64>),
}

/// Per-spatial-node fiber matrices of `T₁`.
#[derive(Clone, Debug)]
pub struct ScatterBlocks {
    nf: usize,
    fiber_w: Vec<f64>,
    blocks: Vec<Block>,
}

impl ScatterBlocks {
    pub fn new(k: &ScatteringKernel, grid: &SphereBundleGrid) -> Self {
        let nf = grid.n_fiber();
        let fiber = &grid.fiber;
        let blocks = par::par_map(grid.spatial.len(), |s| {
            let x = grid.spatial.nodes[s];
            if k.is_zero() {
                return Block::Zero;
            }
            if k.is_direction_free() {
                let v = k.eval(&x, &fiber.dirs[0], &fiber.dirs[0]);
                return if v == 0.0 { Block::Zero } else { Block::Uniform(v) };
            }
            let mut m = vec![0.0; nf * nf];
            let mut any = false;
            for i in 0..nf {
                for j in 0..nf {
                    let v = k.eval(&x, &fiber.dirs[j], &fiber.dirs[i]) * fiber.weights[j];
                    any |= v != 0.0;
                    m[i * nf + j] = v;
                }
            }
            if any {
                Block::Dense(m)
            } else {
                Block::Zero
            }
        });
        ScatterBlocks { nf, fiber_w: fiber.weights.clone(), blocks }
    }

    #[inline]
    pub fn entry(&self, s: usize, i: usize, j: usize) -> f64 {
        match &self.blocks[s] {
            Block::Zero => 0.0,
            Block::Uniform(v) => v * self.fiber_w[j],
            Block::Dense(m) => m[i * self.nf + j],
        }
    }

    pub fn is_zero_at(&self, s: usize) -> bool {
        matches!(self.blocks[s], Block::Zero)
    }

    /// `T₁ u` for a block of width `b`.
    pub fn apply_block(&self, u: &[f64], b: usize) -> Vec<f64> {
        let nf = self.nf;
        let mut out = vec![0.0; u.len()];
        par::par_chunks_mut(&mut out, nf * b, |s, o| {
            let us = &u[s * nf * b..(s + 1) * nf * b];
            match &self.blocks[s] {
                Block::Zero => {}
                Block::Uniform(v) => {
                    let mut acc = vec![0.0; b];
                    for j in 0..nf {
                        for c in 0..b {
                            acc[c] += self.fiber_w[j] * us[j * b + c];
                        }
                    }
                    for i in 0..nf {
                        for c in 0..b {
                            o[i * b + c] = v * acc[c];
                        }
                    }
                }
                Block::Dense(m) => {
                    for i in 0..nf {
                        let row = &m[i * nf..(i + 1) * nf];
                        for (j, mv) in row.iter().enumerate() {
                            if *mv != 0.0 {
                                for c in 0..b {
                                    o[i * b + c] += mv * us[j * b + c];
                                }
                            }
                        }
                    }
                }
            }
        });
        out
    }

    /// `T₁ᵀ y` for a single vector.
    pub fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        let nf = self.nf;
        let mut out = vec![0.0; y.len()];
        par::par_chunks_mut(&mut out, nf, |s, o| {
            let ys = &y[s * nf..(s + 1) * nf];
            for i in 0..nf {
                for j in 0..nf {
                    o[j] += self.entry(s, i, j) * ys[i];
                }
            }
        });
        out
    }
}

/// Subcritical diagnostics on a grid.
#[derive(Clone, Debug)]
pub struct SubcriticalReport {
    /// `‖τ σ_p‖_∞` including the grid-variation margin.
    pub sup_tau_sigma: f64,
    /// `inf (a − σ_p)` minus the grid-variation margin.
    pub min_gap: f64,
    pub sup_sigma: f64,
    pub cond1: bool,
    pub cond2: bool,
    /// `min τ` over the grid nodes.
    pub c0: f64,
    /// `max τ` over the grid nodes and the incoming boundary chords.
    pub diam: f64,
}

/// Which discrete solver to use for `(Id + K) u = J u₊`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveMode {
    Neumann,
    Direct,
}

#[derive(Clone, Debug)]
pub struct SolveReport {
    pub mode: SolveMode,
    /// Neumann terms used (1 for the direct solver).
    pub terms: usize,
    /// `max_c ‖(Id + K)u − J u₊‖_{τ⁻¹L¹} / ‖J u₊‖_{τ⁻¹L¹}` over the block columns.
    pub residual: f64,
}

/// Largest problem accepted by the dense direct solver.
pub const DIRECT_LIMIT: usize = 4096;

/// Discrete transport operators on a grid.
pub struct Transport<'a> {
    pub sys: &'a MagneticSystem,
    pub pair: &'a AdmissiblePair,
    pub grid: &'a SphereBundleGrid,
    pub incoming: &'a BoundaryGrid,
    pub rays: RayTable,
    pub t1: ScatterBlocks,
    pub weights: Vec<f64>,
    pub tau: Vec<f64>,
    pub opts: RayOptions,
}

impl<'a> Transport<'a> {
    pub fn new(
        sys: &'a MagneticSystem,
        pair: &'a AdmissiblePair,
        grid: &'a SphereBundleGrid,
        incoming: &'a BoundaryGrid,
        opts: RayOptions,
    ) -> Result<Self> {
        let starts: Vec<PhasePoint> = (0..grid.len()).map(|i| grid.phase(i)).collect();
        let opts = RayOptions { forward: true, ..opts };
        let rays = RayTable::build(sys, &pair.a, Some(grid), incoming, &starts, opts)?;
        let tau = rays.tau_plus.iter().zip(&rays.tau_minus).map(|(p, m)| p - m).collect();
        Ok(Transport {
            sys,
            pair,
            grid,
            incoming,
            rays,
            t1: ScatterBlocks::new(&pair.k, grid),
            weights: grid.weights(),
            tau,
            opts,
        })
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn apply_j(&self, u_plus: &BoundaryFlux) -> PhaseField {
        self.rays.apply_j_block(&u_plus.values, 1)
    }

    pub fn apply_t0_inv(&self, f: &[f64]) -> PhaseField {
        self.rays.t0inv.apply_block(f, 1)
    }

    pub fn apply_t1(&self, u: &[f64]) -> PhaseField {
        self.t1.apply_block(u, 1)
    }

    pub fn apply_k(&self, u: &[f64]) -> PhaseField {
        self.apply_k_block(u, 1)
    }

    pub fn apply_k_block(&self, u: &[f64], b: usize) -> Vec<f64> {
        if self.pair.k.is_zero() {
            return vec![0.0; u.len()];
        }
        self.rays.t0inv.apply_block(&self.t1.apply_block(u, b), b)
    }

    /// `‖f‖_{L¹(SM)}` for column `c` of a block of width `b`.
    pub fn l1(&self, f: &[f64], b: usize, c: usize) -> f64 {
        self.weights.iter().enumerate().map(|(q, w)| w * f[q * b + c].abs()).sum()
    }

    /// `‖τ⁻¹ f‖_{L¹(SM)}` for column `c` of a block of width `b`.
    pub fn tau_inv_l1(&self, f: &[f64], b: usize, c: usize) -> f64 {
        self.weights
            .iter()
            .zip(&self.tau)
            .enumerate()
            .map(|(q, (w, t))| w * f[q * b + c].abs() / t)
            .sum()
    }

    /// `‖τ f‖_{L¹(SM)}`.
    pub fn tau_l1(&self, f: &[f64]) -> f64 {
        self.weights.iter().zip(&self.tau).zip(f).map(|((w, t), v)| w * t * v.abs()).sum()
    }

    pub fn subcritical(&self, fine_fiber: &FiberGrid) -> SubcriticalReport {
        let nf = self.grid.n_fiber();
        let rows: Vec<(f64, f64, f64)> = par::par_map(self.len(), |q| {
            let p = self.grid.phase(q);
            let e = self.grid.fiber.dirs[q % nf];
            let sp = self.pair.k.sigma_p(&p.x, &e, fine_fiber);
            (sp, self.tau[q] * sp, self.pair.a.eval(&p.x, &e) - sp)
        });
        let mut var_ts: f64 = 0.0;
        let mut var_gap: f64 = 0.0;
        for q in 0..rows.len() {
            let n = (q / nf) * nf + (q % nf + 1) % nf;
            var_ts = var_ts.max((rows[q].1 - rows[n].1).abs());
            var_gap = var_gap.max((rows[q].2 - rows[n].2).abs());
        }
        let sup_sigma = rows.iter().map(|r| r.0).fold(0.0, f64::max);
        // chords from the incoming nodes reach closer to sup τ than interior nodes
        let chords: Vec<f64> = par::par_map_slice(&self.incoming.nodes, |p| self.sys.exit(p, 1.0).map(|e| e.0).unwrap_or(0.0));
        let node_diam = self.tau.iter().cloned().fold(0.0, f64::max);
        let diam = chords.into_iter().fold(node_diam, f64::max);
        let sup_ts = (rows.iter().map(|r| r.1).fold(0.0, f64::max) + var_ts).min(diam * sup_sigma);
        let min_gap = rows.iter().map(|r| r.2).fold(f64::INFINITY, f64::min) - var_gap;
        SubcriticalReport {
            sup_tau_sigma: sup_ts,
            min_gap,
            sup_sigma,
            cond1: sup_ts < 1.0,
            // round-off in the fiber sum must not flip the balanced case a = σ_p
            cond2: min_gap >= -1e-9,
            c0: self.tau.iter().cloned().fold(f64::INFINITY, f64::min),
            diam,
        }
    }

    /// Partial sums of `Σ (−K)^j f` until the relative τ⁻¹-L¹ increment drops below `tol`.
    pub fn neumann_block(&self, rhs: &[f64], b: usize, tol: f64, max_terms: usize) -> Result<(Vec<f64>, usize)> {
        let base: Vec<f64> = (0..b).map(|c| self.tau_inv_l1(rhs, b, c)).collect();
        let mut u = rhs.to_vec();
        let mut term = rhs.to_vec();
        if self.pair.k.is_zero() {
            return Ok((u, 1));
        }
        for n in 1..max_terms {
            term = self.apply_k_block(&term, b);
            for v in term.iter_mut() {
                *v = -*v;
            }
            for (ui, ti) in u.iter_mut().zip(&term) {
                *ui += ti;
            }
            let worst = (0..b)
                .map(|c| {
                    let s = self.tau_inv_l1(&term, b, c);
                    if base[c] > 0.0 {
                        s / base[c]
                    } else {
                        s
                    }
                })
                .fold(0.0, f64::max);
            if !worst.is_finite() {
                return Err(Error::NoConvergence("Neumann series diverged".into()));
            }
            if worst < tol {
                return Ok((u, n + 1));
            }
        }
        Err(Error::NoConvergence(format!("Neumann series did not reach {tol} in {max_terms} terms")))
    }

    /// Dense matrix of `K` (node-major rows and columns).
    pub fn dense_k(&self) -> Result<DMatrix<f64>> {
        let n = self.len();
        if n > DIRECT_LIMIT {
            return Err(Error::Refused(format!("dense operator of size {n} exceeds {DIRECT_LIMIT}")));
        }
        let nf = self.grid.n_fiber();
        let rows: Vec<Vec<f64>> = par::par_map(n, |q| {
            let mut row = vec![0.0; n];
            for (m, v) in self.rays.t0inv.row(q) {
                let (s, i) = (m / nf, m % nf);
                if self.t1.is_zero_at(s) {
                    continue;
                }
                for j in 0..nf {
                    row[s * nf + j] += v * self.t1.entry(s, i, j);
                }
            }
            row
        });
        Ok(DMatrix::from_fn(n, n, |r, c| rows[r][c]))
    }

    /// Dense matrix of `T₁ T₀⁻¹`.
    pub fn dense_t1_t0inv(&self) -> Result<DMatrix<f64>> {
        let n = self.len();
        if n > DIRECT_LIMIT {
            return Err(Error::Refused(format!("dense operator of size {n} exceeds {DIRECT_LIMIT}")));
        }
        let nf = self.grid.n_fiber();
        let rows: Vec<Vec<f64>> = par::par_map(n, |p| {
            let mut row = vec![0.0; n];
            let (s, i) = (p / nf, p % nf);
            if self.t1.is_zero_at(s) {
                return row;
            }
            for j in 0..nf {
                let kij = self.t1.entry(s, i, j);
                if kij == 0.0 {
                    continue;
                }
                for (m, v) in self.rays.t0inv.row(s * nf + j) {
                    row[m] += kij * v;
                }
            }
            row
        });
        Ok(DMatrix::from_fn(n, n, |r, c| rows[r][c]))
    }

    /// Solve `(Id + K) u = rhs` for a block of right-hand sides by dense LU.
    pub fn direct_block(&self, rhs: &[f64], b: usize) -> Result<Vec<f64>> {
        let n = self.len();
        let mut m = self.dense_k()?;
        for i in 0..n {
            m[(i, i)] += 1.0;
        }
        let lu = m.lu();
        let r = DMatrix::from_fn(n, b, |q, c| rhs[q * b + c]);
        let x = lu.solve(&r).ok_or_else(|| Error::Singular("Id + K is singular".into()))?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular("Id + K is singular".into()));
        }
        let mut out = vec![0.0; n * b];
        for q in 0..n {
            for c in 0..b {
                out[q * b + c] = x[(q, c)];
            }
        }
        Ok(out)
    }

    /// `‖(Id + K) u − rhs‖_{τ⁻¹L¹}` relative to `‖rhs‖_{τ⁻¹L¹}`, worst column.
    pub fn residual_block(&self, u: &[f64], rhs: &[f64], b: usize) -> f64 {
        let ku = self.apply_k_block(u, b);
        let r: Vec<f64> = u.iter().zip(&ku).zip(rhs).map(|((u, k), f)| u + k - f).collect();
        (0..b)
            .map(|c| {
                let base = self.tau_inv_l1(rhs, b, c);
                let v = self.tau_inv_l1(&r, b, c);
                if base > 0.0 {
                    v / base
                } else {
                    v
                }
            })
            .fold(0.0, f64::max)
    }

    /// Solve with the requested mode after checking the subcritical conditions.
    pub fn solve_block(
        &self,
        rhs: &[f64],
        b: usize,
        mode: SolveMode,
        report: &SubcriticalReport,
        force: bool,
    ) -> Result<(Vec<f64>, SolveReport)> {
        let (u, terms) = match mode {
            SolveMode::Neumann => {
                if !report.cond1 && !force {
                    return Err(Error::Refused(format!(
                        "Neumann series needs ‖τσ_p‖∞ < 1, found {:.4}",
                        report.sup_tau_sigma
                    )));
                }
                self.neumann_block(rhs, b, 1e-10, 200)?
            }
            SolveMode::Direct => {
                if !report.cond1 && !report.cond2 && !force {
                    return Err(Error::Refused("neither subcritical condition holds".into()));
                }
                (self.direct_block(rhs, b)?, 1)
            }
        };
        let residual = self.residual_block(&u, rhs, b);
        Ok((u, SolveReport { mode, terms, residual }))
    }

    /// Forward solve for a single incoming flux.
    pub fn solve_forward(
        &self,
        u_plus: &BoundaryFlux,
        mode: SolveMode,
        report: &SubcriticalReport,
        force: bool,
    ) -> Result<(PhaseField, SolveReport)> {
        let rhs = self.apply_j(u_plus);
        self.solve_block(&rhs, 1, mode, report, force)
    }

    /// Residual of `(Id + K)(Id − 𝐓⁻¹T₁) u − u` with `𝐓⁻¹ = T₀⁻¹(Id + T₁T₀⁻¹)⁻¹`, relative τ⁻¹-L¹.
    pub fn identity_residual(&self, u: &[f64]) -> Result<f64> {
        let n = self.len();
        let mut l = self.dense_t1_t0inv()?;
        for i in 0..n {
            l[(i, i)] += 1.0;
        }
        let lu = l.lu();
        let t1u = nalgebra::DVector::from_vec(self.apply_t1(u));
        let y = lu.solve(&t1u).ok_or_else(|| Error::Singular("Id + T₁T₀⁻¹ is singular".into()))?;
        let ty = self.apply_t0_inv(y.as_slice());
        let v: Vec<f64> = u.iter().zip(&ty).map(|(a, b)| a - b).collect();
        let kv = self.apply_k(&v);
        let r: Vec<f64> = v.iter().zip(&kv).zip(u).map(|((v, k), u)| v + k - u).collect();
        let base = self.tau_inv_l1(u, 1, 0);
        Ok(self.tau_inv_l1(&r, 1, 0) / base.max(f64::MIN_POSITIVE))
    }

    /// Power-iteration estimate of the `L¹(SM)` norm of `T₁T₀⁻¹`.
    ///
    /// The operator is entrywise non-positive, so iterating `|T₁T₀⁻¹|` on a
    /// positive start vector converges to its dominant growth rate in `L¹`.
    pub fn t1_t0inv_norm(&self) -> f64 {
        if self.pair.k.is_zero() {
            return 0.0;
        }
        let mut f = vec![1.0; self.len()];
        let mut est = 0.0;
        for _ in 0..500 {
            let nf = self.l1(&f, 1, 0);
            let g: Vec<f64> = self.t1.apply_block(&self.apply_t0_inv(&f), 1).iter().map(|v| -v).collect();
            let ng = self.l1(&g, 1, 0);
            if ng == 0.0 {
                return 0.0;
            }
            let next = ng / nf;
            let done = (next - est).abs() < 1e-10 * next;
            est = next;
            f = g.iter().map(|v| v / ng).collect();
            if done {
                break;
            }
        }
        est
    }

    /// Largest weighted column sum of the discrete `T₁T₀⁻¹` (its exact discrete `L¹` norm).
    ///
    /// Both factors have constant sign entrywise, so the weighted column
    /// sums follow from one adjoint product with the weight vector. On coarse
    /// direction grids single columns are inflated by ray effects.
    pub fn t1_t0inv_column_max(&self) -> f64 {
        if self.pair.k.is_zero() {
            return 0.0;
        }
        let y = self.t1.apply_transpose(&self.weights);
        let z = self.rays.t0inv.apply_transpose(&y, self.len());
        z.iter().zip(&self.weights).map(|(v, w)| v.abs() / w).fold(0.0, f64::max)
    }

    /// Outgoing boundary values `u|∂₋ = J u₊ − T₀⁻¹ T₁ u` at the nodes of `out`.
    pub fn outgoing_block(&self, out: &RayTable, u_plus: &[f64], u: &[f64], b: usize) -> Vec<f64> {
        let mut v = out.apply_j_block(u_plus, b);
        if !self.pair.k.is_zero() {
            let s = out.t0inv.apply_block(&self.t1.apply_block(u, b), b);
            for (vi, si) in v.iter_mut().zip(&s) {
                *vi -= si;
            }
        }
        v
    }

    /// Ray table for the nodes of an outgoing boundary grid, with rows into this grid.
    pub fn outgoing_rays(&self, out: &BoundaryGrid) -> Result<RayTable> {
        let grid = if self.pair.k.is_zero() { None } else { Some(self.grid) };
        RayTable::build(
            self.sys,
            &self.pair.a,
            grid,
            self.incoming,
            &out.nodes,
            RayOptions { forward: false, ..self.opts },
        )
    }
}
