//! One-dimensional quadrature rules.

use std::f64::consts::PI;

/// Gauss–Legendre nodes and weights on `[a, b]`.
pub fn gauss_legendre(n: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    assert!(n > 0, "gauss_legendre needs at least one node");
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let half = (b - a) / 2.0;
    let mid = (b + a) / 2.0;
    for i in 0..n.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, z);
            dp = d;
            let dz = p / d;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, z);
        if d != 0.0 {
            dp = d;
        }
        let wt = 2.0 / ((1.0 - z * z) * dp * dp);
        x[i] = mid - half * z;
        x[n - 1 - i] = mid + half * z;
        w[i] = half * wt;
        w[n - 1 - i] = half * wt;
    }
    (x, w)
}

fn legendre(n: usize, z: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = z;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (z * p1 - p0) / (z * z - 1.0);
    (p1, d)
}

/// Number of Simpson panels (even, at least 2) covering `length` with spacing at most `h`.
pub fn simpson_panels(length: f64, h: f64) -> usize {
    let m = (length.abs() / h).ceil() as usize;
    let m = m.max(2);
    m + (m % 2)
}

/// Composite Simpson weights for `m` panels of width `dt` (m even).
pub fn simpson_weights(m: usize, dt: f64) -> Vec<f64> {
    debug_assert!(m.is_multiple_of(2) && m >= 2);
    let mut w = vec![0.0; m + 1];
    for (i, wi) in w.iter_mut().enumerate() {
        *wi = if i == 0 || i == m {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        } * dt
            / 3.0;
    }
    w
}

/// Composite Simpson quadrature of equally spaced samples.
pub fn simpson(values: &[f64], dt: f64) -> f64 {
    let m = values.len() - 1;
    simpson_weights(m, dt)
        .iter()
        .zip(values)
        .map(|(w, v)| w * v)
        .sum()
}

/// Tail integrals `I_q = ∫_{t_q}^{t_m} f` for equally spaced samples `f_0..f_m`.
///
/// Even indices use Simpson panels accumulated from the right end; odd
/// indices add the quadratic-interpolant integral over the half panel.
pub fn cumulative_tail(values: &[f64], dt: f64) -> Vec<f64> {
    let m = values.len() - 1;
    debug_assert!(m.is_multiple_of(2));
    let mut out = vec![0.0; m + 1];
    let mut q = m;
    while q >= 2 {
        out[q - 2] = out[q] + dt / 3.0 * (values[q - 2] + 4.0 * values[q - 1] + values[q]);
        q -= 2;
    }
    let mut q = 1;
    while q < m {
        let piece = dt / 12.0 * (-values[q - 1] + 8.0 * values[q] + 5.0 * values[q + 1]);
        out[q] = out[q + 1] + piece;
        q += 2;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_integrates_polynomials() {
        let (x, w) = gauss_legendre(7, -1.0, 2.0);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(12)).sum();
        let exact = (2f64.powi(13) + 1.0) / 13.0;
        assert!((s - exact).abs() < 1e-10 * exact);
        let total: f64 = w.iter().sum();
        assert!((total - 3.0).abs() < 1e-13);
    }

    #[test]
    fn cumulative_matches_direct() {
        let m = 40;
        let dt = 1.0 / m as f64;
        let v: Vec<f64> = (0..=m).map(|i| (i as f64 * dt).exp()).collect();
        let c = cumulative_tail(&v, dt);
        for (i, ci) in c.iter().enumerate() {
            let exact = 1f64.exp() - (i as f64 * dt).exp();
            assert!((ci - exact).abs() < 1e-7, "{i} {ci} {exact}");
        }
    }
}
