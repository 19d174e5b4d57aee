//! Discretizations of the sphere bundle `SM`, the boundary bundles `∂±SM`,
//! their measures, the Santaló identity and the mollifier families used by
//! the extraction and stability experiments.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::expr::bump;
use crate::geometry::{MagneticSystem, PhasePoint, Vec3};
use crate::par;
use crate::quadrature::{gauss_legendre, simpson_panels, simpson_weights};

/// `∫_ℝ (1 − t²)³ dt`.
pub const BUMP_MASS: f64 = 32.0 / 35.0;

/// Surface measure of the unit sphere `S^{n−1}`.
pub fn sphere_area(dim: usize) -> f64 {
    if dim == 2 {
        2.0 * PI
    } else {
        4.0 * PI
    }
}

/// Interpolation weights along one coordinate.
#[derive(Clone, Debug)]
pub enum Axis {
    /// `n` equally spaced nodes on a circle of period 2π starting at `offset`.
    Periodic { n: usize, offset: f64 },
    /// Sorted nodes; values outside are clamped to the end nodes.
    Nodes(Vec<f64>),
}

impl Axis {
    pub fn len(&self) -> usize {
        match self {
            Axis::Periodic { n, .. } => *n,
            Axis::Nodes(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn node(&self, i: usize) -> f64 {
        match self {
            Axis::Periodic { n, offset } => offset + 2.0 * PI * i as f64 / *n as f64,
            Axis::Nodes(v) => v[i],
        }
    }

    #[inline]
    pub fn bracket(&self, v: f64) -> [(usize, f64); 2] {
        match self {
            Axis::Periodic { n, offset } => {
                let h = 2.0 * PI / *n as f64;
                let u = (v - offset) / h;
                let fl = u.floor();
                let f = u - fl;
                let i = (fl as i64).rem_euclid(*n as i64) as usize;
                [(i, 1.0 - f), ((i + 1) % n, f)]
            }
            Axis::Nodes(nodes) => {
                let n = nodes.len();
                if n == 1 || v <= nodes[0] {
                    return [(0, 1.0), (0, 0.0)];
                }
                if v >= nodes[n - 1] {
                    return [(n - 1, 1.0), (n - 1, 0.0)];
                }
                let j = nodes.partition_point(|&x| x <= v).clamp(1, n - 1);
                let (a, b) = (nodes[j - 1], nodes[j]);
                let f = (v - a) / (b - a);
                [(j - 1, 1.0 - f), (j, f)]
            }
        }
    }
}

/// Sparse interpolation weights into a node array.
#[derive(Clone, Copy, Debug)]
pub struct Stencil {
    pub idx: [u32; 32],
    pub w: [f64; 32],
    pub len: usize,
}

impl Default for Stencil {
    fn default() -> Self {
        Stencil { idx: [0; 32], w: [0.0; 32], len: 0 }
    }
}

impl Stencil {
    #[inline]
    fn push(&mut self, i: usize, w: f64) {
        if w != 0.0 {
            self.idx[self.len] = i as u32;
            self.w[self.len] = w;
            self.len += 1;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.len).map(move |k| (self.idx[k] as usize, self.w[k]))
    }

    pub fn apply(&self, values: &[f64]) -> f64 {
        self.iter().map(|(i, w)| w * values[i]).sum()
    }

    /// Tensor product: index `a * n_b + b`.
    fn product(a: &Stencil, b: &Stencil, n_b: usize) -> Stencil {
        let mut s = Stencil::default();
        for (i, wi) in a.iter() {
            for (j, wj) in b.iter() {
                s.push(i * n_b + j, wi * wj);
            }
        }
        s
    }

    fn from_axes(axes: &[(&Axis, f64)]) -> Stencil {
        let mut s = Stencil::default();
        s.push(0, 1.0);
        for (axis, v) in axes {
            let br = axis.bracket(*v);
            let mut b = Stencil::default();
            for (i, w) in br {
                b.push(i, w);
            }
            s = Stencil::product(&s, &b, axis.len());
        }
        s
    }
}

/// Polar (n=2) or spherical (n=3) tensor grid on the unit ball.
#[derive(Clone, Debug)]
pub struct SpatialGrid {
    pub dim: usize,
    pub axes: Vec<Axis>,
    pub nodes: Vec<Vec3>,
    /// Euclidean volume weights `dx`.
    pub flat_weights: Vec<f64>,
}

impl SpatialGrid {
    /// `shape` is `[radial, angular]` in the plane or `[radial, latitude, longitude]` in space.
    pub fn new(dim: usize, shape: &[usize]) -> Result<Self> {
        if shape.len() != dim || shape.contains(&0) {
            return Err(Error::Invalid(format!("spatial grid needs {dim} positive sizes")));
        }
        let (r, wr) = gauss_legendre(shape[0], 0.0, 1.0);
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        let axes;
        if dim == 2 {
            let na = shape[1];
            let da = 2.0 * PI / na as f64;
            for i in 0..r.len() {
                for k in 0..na {
                    let a = da * k as f64;
                    nodes.push(Vec3::new(r[i] * a.cos(), r[i] * a.sin(), 0.0));
                    weights.push(wr[i] * r[i] * da);
                }
            }
            axes = vec![Axis::Nodes(r), Axis::Periodic { n: na, offset: 0.0 }];
        } else {
            let (mu, wmu) = gauss_legendre(shape[1], -1.0, 1.0);
            let nl = shape[2];
            let dp = 2.0 * PI / nl as f64;
            for i in 0..r.len() {
                for l in 0..mu.len() {
                    let st = (1.0 - mu[l] * mu[l]).sqrt();
                    for m in 0..nl {
                        let p = dp * m as f64;
                        nodes.push(r[i] * Vec3::new(st * p.cos(), st * p.sin(), mu[l]));
                        weights.push(wr[i] * r[i] * r[i] * wmu[l] * dp);
                    }
                }
            }
            axes = vec![Axis::Nodes(r), Axis::Nodes(mu), Axis::Periodic { n: nl, offset: 0.0 }];
        }
        Ok(SpatialGrid { dim, axes, nodes, flat_weights: weights })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn stencil(&self, x: &Vec3) -> Stencil {
        let r = x.norm();
        let phi = x[1].atan2(x[0]);
        if self.dim == 2 {
            Stencil::from_axes(&[(&self.axes[0], r), (&self.axes[1], phi)])
        } else {
            let mu = if r > 0.0 { x[2] / r } else { 0.0 };
            Stencil::from_axes(&[(&self.axes[0], r), (&self.axes[1], mu), (&self.axes[2], phi)])
        }
    }
}

/// Quadrature on the unit sphere of Euclidean directions.
#[derive(Clone, Debug)]
pub struct FiberGrid {
    pub dim: usize,
    pub axes: Vec<Axis>,
    pub dirs: Vec<Vec3>,
    pub weights: Vec<f64>,
}

impl FiberGrid {
    /// `shape` is `[angles]` in the plane or `[latitudes, longitudes]` in space.
    pub fn new(dim: usize, shape: &[usize]) -> Result<Self> {
        if shape.len() != dim - 1 || shape.contains(&0) {
            return Err(Error::Invalid(format!("fiber grid needs {} positive sizes", dim - 1)));
        }
        let mut dirs = Vec::new();
        let mut weights = Vec::new();
        let axes;
        if dim == 2 {
            let n = shape[0];
            let h = 2.0 * PI / n as f64;
            for j in 0..n {
                let a = h * j as f64;
                dirs.push(Vec3::new(a.cos(), a.sin(), 0.0));
                weights.push(h);
            }
            axes = vec![Axis::Periodic { n, offset: 0.0 }];
        } else {
            let (mu, wmu) = gauss_legendre(shape[0], -1.0, 1.0);
            let nl = shape[1];
            let dp = 2.0 * PI / nl as f64;
            for l in 0..mu.len() {
                let st = (1.0 - mu[l] * mu[l]).sqrt();
                for m in 0..nl {
                    let p = dp * m as f64;
                    dirs.push(Vec3::new(st * p.cos(), st * p.sin(), mu[l]));
                    weights.push(wmu[l] * dp);
                }
            }
            axes = vec![Axis::Nodes(mu), Axis::Periodic { n: nl, offset: 0.0 }];
        }
        Ok(FiberGrid { dim, axes, dirs, weights })
    }

    pub fn len(&self) -> usize {
        self.dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }

    /// Interpolation stencil for a Euclidean unit direction.
    pub fn stencil(&self, e: &Vec3) -> Stencil {
        let phi = e[1].atan2(e[0]);
        if self.dim == 2 {
            Stencil::from_axes(&[(&self.axes[0], phi)])
        } else {
            Stencil::from_axes(&[(&self.axes[0], e[2].clamp(-1.0, 1.0)), (&self.axes[1], phi)])
        }
    }
}

/// Tensor-product discretization of `SM` with weights realizing `dΣ^{2n−1}`.
#[derive(Clone, Debug)]
pub struct SphereBundleGrid {
    pub dim: usize,
    pub spatial: SpatialGrid,
    pub fiber: FiberGrid,
    /// `c(x)` at the spatial nodes.
    pub conformal: Vec<f64>,
    /// `dVol_g` weights of the spatial nodes.
    pub volume: Vec<f64>,
}

impl SphereBundleGrid {
    pub fn new(sys: &MagneticSystem, spatial_shape: &[usize], fiber_shape: &[usize]) -> Result<Self> {
        let spatial = SpatialGrid::new(sys.dim, spatial_shape)?;
        let fiber = FiberGrid::new(sys.dim, fiber_shape)?;
        let conformal: Vec<f64> = spatial.nodes.iter().map(|x| sys.c(x)).collect();
        let half = sys.dim as f64 / 2.0;
        let volume = spatial
            .flat_weights
            .iter()
            .zip(&conformal)
            .map(|(w, c)| w * c.powf(half))
            .collect();
        Ok(SphereBundleGrid { dim: sys.dim, spatial, fiber, conformal, volume })
    }

    pub fn len(&self) -> usize {
        self.spatial.len() * self.fiber.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_fiber(&self) -> usize {
        self.fiber.len()
    }

    pub fn phase(&self, i: usize) -> PhasePoint {
        let nf = self.fiber.len();
        let (s, f) = (i / nf, i % nf);
        PhasePoint { x: self.spatial.nodes[s], xi: self.fiber.dirs[f] / self.conformal[s].sqrt() }
    }

    pub fn weight(&self, i: usize) -> f64 {
        let nf = self.fiber.len();
        self.volume[i / nf] * self.fiber.weights[i % nf]
    }

    pub fn weights(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.weight(i)).collect()
    }

    /// Multilinear interpolation stencil at an arbitrary phase point.
    pub fn stencil(&self, p: &PhasePoint) -> Stencil {
        let a = self.spatial.stencil(&p.x);
        let b = self.fiber.stencil(&p.xi.normalize());
        Stencil::product(&a, &b, self.fiber.len())
    }

    pub fn describe(&self) -> String {
        let sp: Vec<String> = self.spatial.axes.iter().map(|a| a.len().to_string()).collect();
        let fb: Vec<String> = self.fiber.axes.iter().map(|a| a.len().to_string()).collect();
        format!("sm:n{}:s[{}]:f[{}]", self.dim, sp.join(","), fb.join(","))
    }
}

/// Which half of the boundary bundle a grid discretizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    /// `∂₊SM`, directions pointing into the ball.
    Incoming,
    /// `∂₋SM`, directions pointing out of the ball.
    Outgoing,
}

/// Discretization of `∂±SM`.
///
/// Directions are parametrized by their tangential component `s` in the
/// unit (n−1)-ball; in these coordinates `dμ = ds · dA_g(x′)` exactly.
#[derive(Clone, Debug)]
pub struct BoundaryGrid {
    pub dim: usize,
    pub side: Side,
    pub graze: f64,
    pub pos_axes: Vec<Axis>,
    pub dir_axes: Vec<Axis>,
    pub positions: Vec<Vec3>,
    /// `dA_g` weights of the positions.
    pub pos_weights: Vec<f64>,
    /// Tangential coordinates of the direction nodes.
    pub dir_coords: Vec<[f64; 2]>,
    pub dir_weights: Vec<f64>,
    pub nodes: Vec<PhasePoint>,
    /// `dμ` weights of the nodes.
    pub weights: Vec<f64>,
}

impl BoundaryGrid {
    /// `positions` is `[n]` or `[latitudes, longitudes]`; `directions` is `[n]` or `[radial, angular]`.
    pub fn new(sys: &MagneticSystem, side: Side, positions: &[usize], directions: &[usize], graze: f64) -> Result<Self> {
        let dim = sys.dim;
        if positions.len() != dim - 1 || directions.len() != dim - 1 {
            return Err(Error::Invalid("boundary grid sizes do not match the dimension".into()));
        }
        if positions.iter().chain(directions).any(|&n| n == 0) {
            return Err(Error::Invalid("boundary grid sizes must be positive".into()));
        }
        let mut pos = Vec::new();
        let mut pos_flat = Vec::new();
        let pos_axes;
        if dim == 2 {
            let n = positions[0];
            let h = 2.0 * PI / n as f64;
            for k in 0..n {
                let a = h * k as f64;
                pos.push(Vec3::new(a.cos(), a.sin(), 0.0));
                pos_flat.push(h);
            }
            pos_axes = vec![Axis::Periodic { n, offset: 0.0 }];
        } else {
            let (mu, wmu) = gauss_legendre(positions[0], -1.0, 1.0);
            let nl = positions[1];
            let dp = 2.0 * PI / nl as f64;
            for l in 0..mu.len() {
                let st = (1.0 - mu[l] * mu[l]).sqrt();
                for m in 0..nl {
                    let p = dp * m as f64;
                    pos.push(Vec3::new(st * p.cos(), st * p.sin(), mu[l]));
                    pos_flat.push(wmu[l] * dp);
                }
            }
            pos_axes = vec![Axis::Nodes(mu), Axis::Periodic { n: nl, offset: 0.0 }];
        }
        let mut dir_coords = Vec::new();
        let mut dir_weights = Vec::new();
        let dir_axes;
        if dim == 2 {
            let n = directions[0];
            let h = 2.0 / n as f64;
            let s: Vec<f64> = (0..n).map(|i| -1.0 + h * (i as f64 + 0.5)).collect();
            for &si in &s {
                dir_coords.push([si, 0.0]);
                dir_weights.push(h);
            }
            dir_axes = vec![Axis::Nodes(s)];
        } else {
            let (nr, na) = (directions[0], directions[1]);
            let h = 1.0 / nr as f64;
            let da = 2.0 * PI / na as f64;
            let rho: Vec<f64> = (0..nr).map(|i| h * (i as f64 + 0.5)).collect();
            for &r in &rho {
                for k in 0..na {
                    let a = da * k as f64;
                    dir_coords.push([r * a.cos(), r * a.sin()]);
                    dir_weights.push(r * h * da);
                }
            }
            dir_axes = vec![Axis::Nodes(rho), Axis::Periodic { n: na, offset: 0.0 }];
        }
        for s in &dir_coords {
            let normal = (1.0 - s[0] * s[0] - s[1] * s[1]).max(0.0).sqrt();
            if normal <= graze {
                return Err(Error::Invalid(format!(
                    "direction resolution reaches the grazing cutoff {graze}"
                )));
            }
        }
        let half = (dim as f64 - 1.0) / 2.0;
        let pos_weights: Vec<f64> = pos.iter().zip(&pos_flat).map(|(x, w)| w * sys.c(x).powf(half)).collect();
        let mut nodes = Vec::with_capacity(pos.len() * dir_coords.len());
        let mut weights = Vec::with_capacity(nodes.capacity());
        for (x, wx) in pos.iter().zip(&pos_weights) {
            let (e1, e2) = tangent_frame(dim, x);
            for (s, ws) in dir_coords.iter().zip(&dir_weights) {
                let normal = (1.0 - s[0] * s[0] - s[1] * s[1]).max(0.0).sqrt();
                let sign = if side == Side::Incoming { -1.0 } else { 1.0 };
                let e = sign * normal * x + s[0] * e1 + s[1] * e2;
                nodes.push(PhasePoint { x: *x, xi: e / sys.c(x).sqrt() });
                weights.push(wx * ws);
            }
        }
        Ok(BoundaryGrid {
            dim,
            side,
            graze,
            pos_axes,
            dir_axes,
            positions: pos,
            pos_weights,
            dir_coords,
            dir_weights,
            nodes,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn n_dir(&self) -> usize {
        self.dir_coords.len()
    }

    pub fn total_measure(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Tangential direction coordinates of a boundary phase point.
    pub fn direction_coords(&self, sys: &MagneticSystem, p: &PhasePoint) -> [f64; 2] {
        let x = p.x.normalize();
        let e = p.xi * sys.c(&p.x).sqrt();
        let (e1, e2) = tangent_frame(self.dim, &x);
        [e.dot(&e1), e.dot(&e2)]
    }

    /// Hat-function weights of the nodes at a boundary phase point.
    pub fn stencil(&self, sys: &MagneticSystem, p: &PhasePoint) -> Stencil {
        let x = p.x.normalize();
        let s = self.direction_coords(sys, p);
        let phi = x[1].atan2(x[0]);
        let pos = if self.dim == 2 {
            Stencil::from_axes(&[(&self.pos_axes[0], phi)])
        } else {
            Stencil::from_axes(&[(&self.pos_axes[0], x[2].clamp(-1.0, 1.0)), (&self.pos_axes[1], phi)])
        };
        let dir = if self.dim == 2 {
            Stencil::from_axes(&[(&self.dir_axes[0], s[0])])
        } else {
            let rho = (s[0] * s[0] + s[1] * s[1]).sqrt();
            Stencil::from_axes(&[(&self.dir_axes[0], rho), (&self.dir_axes[1], s[1].atan2(s[0]))])
        };
        Stencil::product(&pos, &dir, self.n_dir())
    }

    /// Nearest node to a boundary phase point (position first, then direction).
    pub fn nearest(&self, sys: &MagneticSystem, p: &PhasePoint) -> usize {
        let st = self.stencil(sys, p);
        let mut best = (0, -1.0);
        for (i, w) in st.iter() {
            if w > best.1 {
                best = (i, w);
            }
        }
        best.0
    }

    pub fn describe(&self) -> String {
        let pa: Vec<String> = self.pos_axes.iter().map(|a| a.len().to_string()).collect();
        let da: Vec<String> = self.dir_axes.iter().map(|a| a.len().to_string()).collect();
        format!(
            "bd:n{}:{:?}:p[{}]:d[{}]:g{:e}",
            self.dim,
            self.side,
            pa.join(","),
            da.join(","),
            self.graze
        )
    }
}

/// Orthonormal tangent frame of the unit sphere at `x` (second vector zero in the plane).
pub fn tangent_frame(dim: usize, x: &Vec3) -> (Vec3, Vec3) {
    if dim == 2 {
        return (Vec3::new(-x[1], x[0], 0.0), Vec3::zeros());
    }
    let rho = (x[0] * x[0] + x[1] * x[1]).sqrt();
    if rho < 1e-12 {
        return (Vec3::x(), Vec3::y() * x[2].signum());
    }
    let (cp, sp) = (x[0] / rho, x[1] / rho);
    let e_theta = Vec3::new(x[2] * cp, x[2] * sp, -rho);
    let e_phi = Vec3::new(-sp, cp, 0.0);
    (e_theta, e_phi)
}

/// Nodal values of a function on one side of the boundary bundle.
#[derive(Clone, Debug)]
pub struct BoundaryFlux {
    pub side: Side,
    pub values: Vec<f64>,
}

impl BoundaryFlux {
    pub fn zeros(grid: &BoundaryGrid) -> Self {
        BoundaryFlux { side: grid.side, values: vec![0.0; grid.len()] }
    }

    pub fn from_fn(grid: &BoundaryGrid, f: impl Fn(&PhasePoint) -> f64 + Sync + Send) -> Self {
        BoundaryFlux { side: grid.side, values: par::par_map_slice(&grid.nodes, f) }
    }

    pub fn l1(&self, grid: &BoundaryGrid) -> f64 {
        self.values.iter().zip(&grid.weights).map(|(v, w)| v.abs() * w).sum()
    }

    pub fn integral(&self, grid: &BoundaryGrid) -> f64 {
        self.values.iter().zip(&grid.weights).map(|(v, w)| v * w).sum()
    }

    /// Interpolated value at a boundary phase point.
    pub fn eval(&self, sys: &MagneticSystem, grid: &BoundaryGrid, p: &PhasePoint) -> f64 {
        grid.stencil(sys, p).apply(&self.values)
    }
}

/// `∫_{SM} f dΣ^{2n−1}` by the grid quadrature.
pub fn integrate_sm(grid: &SphereBundleGrid, f: impl Fn(&PhasePoint) -> f64 + Sync + Send) -> f64 {
    par::par_sum(grid.len(), |i| grid.weight(i) * f(&grid.phase(i)))
}

/// `∫_{∂±SM} f dμ` by the grid quadrature.
pub fn integrate_boundary(grid: &BoundaryGrid, f: impl Fn(&PhasePoint) -> f64 + Sync + Send) -> f64 {
    par::par_sum(grid.len(), |i| grid.weights[i] * f(&grid.nodes[i]))
}

#[derive(Clone, Debug)]
pub struct SantaloReport {
    pub lhs: f64,
    pub rhs_plus: f64,
    pub rhs_minus: f64,
    /// Relative discrepancies (lhs, rhs₊), (lhs, rhs₋), (rhs₊, rhs₋).
    pub discrepancies: [f64; 3],
}

impl SantaloReport {
    pub fn max_discrepancy(&self) -> f64 {
        self.discrepancies.iter().cloned().fold(0.0, f64::max)
    }
}

fn rel(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Integral of `f` along the flow from a boundary node over its full chord.
pub fn chord_integral(
    sys: &MagneticSystem,
    p: &PhasePoint,
    dir: f64,
    spacing: f64,
    f: &(dyn Fn(&PhasePoint) -> f64 + Sync),
) -> Result<f64> {
    let path = sys.trace_half(p, dir)?;
    let (t0, t1) = (path.tau_minus, path.tau_plus);
    if t1 - t0 <= 0.0 {
        return Ok(0.0);
    }
    let m = simpson_panels(t1 - t0, spacing);
    let dt = (t1 - t0) / m as f64;
    let w = simpson_weights(m, dt);
    Ok((0..=m).map(|q| w[q] * f(&path.phase_at(sys, t0 + dt * q as f64))).sum())
}

/// Both sides of the Santaló formula for `f`.
pub fn santalo_check(
    sys: &MagneticSystem,
    grid: &SphereBundleGrid,
    incoming: &BoundaryGrid,
    outgoing: &BoundaryGrid,
    spacing: f64,
    f: &(dyn Fn(&PhasePoint) -> f64 + Sync),
) -> Result<SantaloReport> {
    let lhs = integrate_sm(grid, f);
    let plus: Vec<Result<f64>> = par::par_map(incoming.len(), |i| {
        Ok(incoming.weights[i] * chord_integral(sys, &incoming.nodes[i], 1.0, spacing, f)?)
    });
    let minus: Vec<Result<f64>> = par::par_map(outgoing.len(), |i| {
        Ok(outgoing.weights[i] * chord_integral(sys, &outgoing.nodes[i], -1.0, spacing, f)?)
    });
    let mut rhs_plus = 0.0;
    for v in plus {
        rhs_plus += v?;
    }
    let mut rhs_minus = 0.0;
    for v in minus {
        rhs_minus += v?;
    }
    Ok(SantaloReport {
        lhs,
        rhs_plus,
        rhs_minus,
        discrepancies: [rel(lhs, rhs_plus), rel(lhs, rhs_minus), rel(rhs_plus, rhs_minus)],
    })
}

/// Peak-normalized profile `ψ_ε(l) = ψ(l/ε)` with `ψ(0) = 1`.
pub fn delta_family_psi(eps: f64) -> impl Fn(f64) -> f64 + Copy {
    move |l: f64| bump(l / eps)
}

/// Mass of `ζ ↦ ψ(|ζ − e|/ε)` over the unit sphere `S^{n−1}`.
pub fn fiber_bump_mass(dim: usize, eps: f64) -> f64 {
    // chord |ζ − e| = 2 sin(θ/2); support ends where the chord reaches ε
    let tmax = if eps >= 2.0 { PI } else { 2.0 * (eps / 2.0).asin() };
    let (th, w) = gauss_legendre(200, 0.0, tmax);
    th.iter()
        .zip(&w)
        .map(|(t, wt)| {
            let v = bump(2.0 * (t / 2.0).sin() / eps);
            if dim == 2 {
                2.0 * wt * v
            } else {
                2.0 * PI * t.sin() * wt * v
            }
        })
        .sum()
}

/// Unit-mass mollifier on the direction sphere, centered at a Euclidean unit direction.
#[derive(Clone, Copy, Debug)]
pub struct FiberMollifier {
    pub center: Vec3,
    pub eps: f64,
    pub mass: f64,
}

impl FiberMollifier {
    pub fn new(dim: usize, center: Vec3, eps: f64) -> Self {
        FiberMollifier { center: center.normalize(), eps, mass: fiber_bump_mass(dim, eps) }
    }

    /// Density at the Euclidean unit direction `e`.
    pub fn eval(&self, e: &Vec3) -> f64 {
        bump((e - self.center).norm() / self.eps) / self.mass
    }
}

/// Box approximate identity `w_ε` centered at an incoming node, with unit `L¹(dμ)` mass.
pub fn delta_family_w(sys: &MagneticSystem, grid: &BoundaryGrid, eps: f64, center: &PhasePoint) -> Result<BoundaryFlux> {
    if grid.side != Side::Incoming {
        return Err(Error::Invalid("w_ε lives on the incoming boundary".into()));
    }
    if !(eps > 0.0) {
        return Err(Error::Invalid("ε must be positive".into()));
    }
    let s0 = grid.direction_coords(sys, center);
    let x0 = center.x.normalize();
    let mut flux = BoundaryFlux::zeros(grid);
    let nd = grid.n_dir();
    for (k, v) in flux.values.iter_mut().enumerate() {
        let x = grid.positions[k / nd];
        let s = grid.dir_coords[k % nd];
        let ds = ((s[0] - s0[0]).powi(2) + (s[1] - s0[1]).powi(2)).sqrt();
        if (x - x0).norm() < eps && ds < eps {
            *v = 1.0;
        }
    }
    let mass = flux.integral(grid);
    if mass == 0.0 {
        let j = grid.nearest(sys, center);
        flux.values[j] = 1.0 / grid.weights[j];
    } else {
        for v in &mut flux.values {
            *v /= mass;
        }
    }
    Ok(flux)
}

/// Geometry of a scattering configuration `(y, η′, η)` with the defining functions `h₁`, `h₂`.
#[derive(Clone, Debug)]
pub struct ScatterFrame {
    pub y: Vec3,
    /// Incoming direction at `y` (g-unit).
    pub eta_in: Vec3,
    /// Outgoing direction at `y` (g-unit).
    pub eta_out: Vec3,
    /// `x* = γ_{y,η′}(τ₋(y,η′))` and the tangent of that geodesic there.
    pub x_star: PhasePoint,
    /// Signed backward exit time, so `tau_in <= 0`.
    pub tau_in: f64,
    /// `η* = dh/ds` at `s = 0`, tangent to the sphere at `x*`.
    pub eta_star: Vec3,
    pub eta_star_norm2: f64,
    /// `|⟨η, η′⟩_g|`, flagged when above 0.999.
    pub alignment: f64,
    e1: Vec3,
    e2: Vec3,
}

impl ScatterFrame {
    pub fn new(sys: &MagneticSystem, y: Vec3, eta_in: Vec3, eta_out: Vec3) -> Result<Self> {
        let eta_in = sys.unit(&y, &eta_in);
        let eta_out = sys.unit(&y, &eta_out);
        let alignment = sys.g_dot(&y, &eta_in, &eta_out).abs();
        if alignment > 1.0 - 1e-9 {
            return Err(Error::Degenerate("η and η′ are parallel".into()));
        }
        let start = PhasePoint { x: y, xi: eta_in };
        let (tau_in, x_star) = sys.exit(&start, -1.0)?;
        let h = |s: f64| -> Result<Vec3> {
            let ys = sys.flow(&PhasePoint { x: y, xi: eta_out }, s);
            let b = sys.transport_along(&PhasePoint { x: y, xi: eta_out }, &eta_in, s);
            let (_, q) = sys.exit(&PhasePoint { x: ys.x, xi: sys.unit(&ys.x, &b) }, -1.0)?;
            Ok(q.x)
        };
        let ds = 1e-4;
        let eta_star = (h(ds)? - h(-ds)?) / (2.0 * ds);
        let eta_star_norm2 = sys.c(&x_star.x) * eta_star.norm_squared();
        if eta_star_norm2 < 1e-12 {
            return Err(Error::Degenerate("η* vanishes".into()));
        }
        // g-orthonormal basis of span{η, η′} at y
        let c = sys.c(&y);
        let e1 = eta_out;
        let e2 = eta_in - c * eta_in.dot(&e1) * e1;
        let e2 = e2 / (c.sqrt() * e2.norm());
        Ok(ScatterFrame { y, eta_in, eta_out, x_star, tau_in, eta_star, eta_star_norm2, alignment, e1, e2 })
    }

    pub fn flagged(&self) -> bool {
        self.alignment > 0.999
    }

    /// `h₁(z) = ‖π(z)‖_g`: normal part of the arrival velocity at `y` of the geodesic from `z`.
    pub fn h1(&self, sys: &MagneticSystem, z: &Vec3) -> Result<f64> {
        let w = sys.magnetic_exp_inverse(z, &self.y)?;
        let t = sys.g_norm(z, &w);
        if t == 0.0 {
            return Ok(0.0);
        }
        let end = sys.flow(&PhasePoint { x: *z, xi: w / t }, t);
        let v = end.xi * t;
        let c = sys.c(&self.y);
        let pi = v - c * v.dot(&self.e1) * self.e1 - c * v.dot(&self.e2) * self.e2;
        Ok(c.sqrt() * pi.norm())
    }

    /// `h₂(x′) = ⟨(exp_{x*})⁻¹ x′, η*⟩_g`.
    pub fn h2(&self, sys: &MagneticSystem, xp: &Vec3) -> Result<f64> {
        let w = sys.magnetic_exp_inverse(&self.x_star.x, xp)?;
        Ok(sys.c(&self.x_star.x) * w.dot(&self.eta_star))
    }

    /// `h(s)`: backward exit point of the geodesic through `y(s)` with direction `b(s)`.
    pub fn h_curve(&self, sys: &MagneticSystem, s: f64) -> Result<PhasePoint> {
        let start = PhasePoint { x: self.y, xi: self.eta_out };
        let ys = sys.flow(&start, s);
        let b = sys.transport_along(&start, &self.eta_in, s);
        let (_, q) = sys.exit(&PhasePoint { x: ys.x, xi: sys.unit(&ys.x, &b) }, -1.0)?;
        Ok(q)
    }

    /// `φ_ρ(z) = ψ(h₁(z)/ρ)`, peak one on the set `Z`.
    pub fn phi_rho(&self, sys: &MagneticSystem, rho: f64, z: &Vec3) -> Result<f64> {
        Ok(bump(self.h1(sys, z)? / rho))
    }

    /// `χ_δ(x′) = δ⁻¹ χ(h₂(x′)/δ)` with `∫χ = ‖η*‖²`.
    pub fn chi_delta(&self, sys: &MagneticSystem, delta: f64, xp: &Vec3) -> Result<f64> {
        let profile = self.eta_star_norm2 / BUMP_MASS;
        Ok(profile * bump(self.h2(sys, xp)? / delta) / delta)
    }
}
