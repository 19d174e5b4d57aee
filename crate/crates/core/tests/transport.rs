use std::f64::consts::PI;

use magrt::expr::bump;
use magrt::geometry::{MagneticSystem, PhasePoint, Vec3};
use magrt::phase_space::*;
use magrt::transport::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cutoff(x: &Vec3) -> f64 {
    bump(x.norm() / 0.9)
}

fn grids(sys: &MagneticSystem, fiber: usize) -> (SphereBundleGrid, BoundaryGrid, BoundaryGrid) {
    let g = SphereBundleGrid::new(sys, &[8, 16], &[fiber]).unwrap();
    let inc = BoundaryGrid::new(sys, Side::Incoming, &[24], &[16], 1e-3).unwrap();
    let out = BoundaryGrid::new(sys, Side::Outgoing, &[24], &[16], 1e-3).unwrap();
    (g, inc, out)
}

fn opts() -> RayOptions {
    RayOptions { spacing: 0.05, forward: true }
}

fn magnetic() -> MagneticSystem {
    MagneticSystem::flat(2).with_constant_b(0.3).with_step(5e-3)
}

fn random_field(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn balanced(level: f64) -> AdmissiblePair {
    AdmissiblePair::new(
        Attenuation::isotropic(move |x| level * cutoff(x)),
        ScatteringKernel::isotropic(move |x| level / (2.0 * PI) * cutoff(x)),
        0.9,
    )
}

#[test]
fn attenuation_examples() {
    let sys = MagneticSystem::flat(2);
    let p = sys.phase(Vec3::new(-1.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0));
    assert_eq!(attenuation_e(&sys, &Attenuation::zero(), &p, 0.0, 2.0, 0.05).unwrap(), 1.0);
    let a0 = Attenuation::isotropic(|_| 0.7);
    let e = attenuation_e(&sys, &a0, &p, 0.0, 2.0, 0.05).unwrap();
    assert!((e - (-1.4f64).exp()).abs() < 1e-12);
    assert!(attenuation_e(&sys, &a0, &p, 0.0, 2.5, 0.05).is_err());

    let msys = magnetic();
    let g = Attenuation::isotropic(|x| 1.3 * (-(x - Vec3::new(0.2, 0.1, 0.0)).norm_squared() / 0.08).exp());
    let q = msys.phase(Vec3::new(0.1, -0.2, 0.0), Vec3::new(0.6, 0.8, 0.0));
    let (tm, tp) = msys.exit_times(&q).unwrap();
    let coarse = attenuation_e(&msys, &g, &q, tm, tp, 0.02).unwrap();
    let fine = attenuation_e(&msys, &g, &q, tm, tp, 0.002).unwrap();
    assert!((coarse - fine).abs() < 1e-7, "{coarse} {fine}");
    let r = 0.3;
    let split = attenuation_e(&msys, &g, &q, tm, r, 0.005).unwrap() * attenuation_e(&msys, &g, &q, r, tp, 0.005).unwrap();
    let whole = attenuation_e(&msys, &g, &q, tm, tp, 0.005).unwrap();
    assert!((split - whole).abs() < 1e-8);
    assert_eq!(attenuation_e(&msys, &g, &q, r, r, 0.005).unwrap(), 1.0);
}

#[test]
fn j_operator() {
    let sys = magnetic();
    let (g, inc, _) = grids(&sys, 16);
    let vac = AdmissiblePair::vacuum();
    let tr = Transport::new(&sys, &vac, &g, &inc, opts()).unwrap();
    let one = BoundaryFlux::from_fn(&inc, |_| 1.0);
    assert!(tr.apply_j(&one).iter().all(|v| (v - 1.0).abs() < 1e-12));

    let pair = balanced(0.5);
    let tr = Transport::new(&sys, &pair, &g, &inc, opts()).unwrap();
    for seed in 0..5 {
        let u = BoundaryFlux { side: Side::Incoming, values: random_field(inc.len(), seed) };
        let ju = tr.apply_j(&u);
        assert!(tr.tau_inv_l1(&ju, 1, 0) <= 1.02 * u.l1(&inc));
    }

    // a single incoming node lights up only phase points whose backward ray ends near it
    let mut spot = BoundaryFlux::zeros(&inc);
    let k = 5 * inc.n_dir() + 7;
    spot.values[k] = 1.0;
    let ju = tr.apply_j(&spot);
    let lit: Vec<usize> = (0..ju.len()).filter(|&q| ju[q] > 0.0).collect();
    assert!(!lit.is_empty());
    let path = sys.trace(&inc.nodes[k]).unwrap();
    for q in lit {
        let p = g.phase(q);
        let d = path.samples.iter().map(|s| (s.x - p.x).norm()).fold(f64::INFINITY, f64::min);
        assert!(d < 0.45, "node {q} at distance {d}");
    }
}

#[test]
fn t0_inverse_examples() {
    let sys = magnetic();
    let (g, inc, _) = grids(&sys, 16);
    let vac = AdmissiblePair::vacuum();
    let tr = Transport::new(&sys, &vac, &g, &inc, opts()).unwrap();
    assert!(tr.apply_t0_inv(&vec![0.0; tr.len()]).iter().all(|v| *v == 0.0));
    let v = tr.apply_t0_inv(&vec![1.0; tr.len()]);
    for q in 0..tr.len() {
        assert!((v[q] - tr.rays.tau_minus[q]).abs() < 1e-9);
        assert!(v[q] <= 0.0);
    }
    let pair = balanced(0.5);
    let tr = Transport::new(&sys, &pair, &g, &inc, opts()).unwrap();
    for seed in 0..5 {
        let f = random_field(tr.len(), 10 + seed);
        let t = tr.apply_t0_inv(&f);
        assert!(tr.tau_inv_l1(&t, 1, 0) <= 1.02 * tr.l1(&f, 1, 0));
    }
}

#[test]
fn t1_examples() {
    let sys = magnetic();
    let (g, inc, _) = grids(&sys, 16);
    let k0 = 0.3;
    let pair = AdmissiblePair::new(Attenuation::zero(), ScatteringKernel::isotropic(move |_| k0), 1.0);
    let tr = Transport::new(&sys, &pair, &g, &inc, opts()).unwrap();
    let t = tr.apply_t1(&vec![1.0; tr.len()]);
    assert!(t.iter().all(|v| (v - k0 * 2.0 * PI).abs() < 1e-12));
    let vac = AdmissiblePair::vacuum();
    let tv = Transport::new(&sys, &vac, &g, &inc, opts()).unwrap();
    assert!(tv.apply_t1(&vec![1.0; tv.len()]).iter().all(|v| *v == 0.0));
    assert!(tv.apply_k(&vec![1.0; tv.len()]).iter().all(|v| *v == 0.0));

    // anisotropic kernel against a 4× fiber refinement with the same smooth u
    let kern = ScatteringKernel::from_fn(|_, eta, xi| 0.2 * (1.0 + 0.8 * eta.dot(xi)).powi(2));
    let u = |e: &Vec3| 1.0 + e[0] * e[0] + 0.5 * e[1];
    let coarse = FiberGrid::new(2, &[16]).unwrap();
    let fine = FiberGrid::new(2, &[64]).unwrap();
    for out in [Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.6, -0.8, 0.0)] {
        let q = |f: &FiberGrid| -> f64 {
            f.dirs.iter().zip(&f.weights).map(|(e, w)| w * kern.eval(&Vec3::zeros(), e, &out) * u(e)).sum()
        };
        assert!((q(&coarse) - q(&fine)).abs() < 1e-10 * q(&fine));
    }
    let pair = AdmissiblePair::new(Attenuation::zero(), kern, 1.0);
    let tr = Transport::new(&sys, &pair, &g, &inc, opts()).unwrap();
    let uv: Vec<f64> = (0..tr.len()).map(|i| u(&g.fiber.dirs[i % 16])).collect();
    let t = tr.apply_t1(&uv);
    let fine_val: f64 = fine
        .dirs
        .iter()
        .zip(&fine.weights)
        .map(|(e, w)| w * 0.2 * (1.0 + 0.8 * e.dot(&g.fiber.dirs[3])).powi(2) * u(e))
        .sum();
    assert!((t[3] - fine_val).abs() < 1e-10);
}

#[test]
fn lemma_bounds() {
    let sys = magnetic();
    let (g, inc, _) = grids(&sys, 16);
    let pair = balanced(0.6);
    let tr = Transport::new(&sys, &pair, &g, &inc, opts()).unwrap();
    let rep = tr.subcritical(&FiberGrid::new(2, &[64]).unwrap());
    for seed in 0..5 {
        let f = random_field(tr.len(), 20 + seed);
        let tf: Vec<f64> = f.iter().zip(&tr.tau).map(|(v, t)| v * t).collect();
        let lhs = tr.l1(&tr.apply_t1(&tf), 1, 0);
        assert!(lhs <= 1.02 * rep.sup_tau_sigma * tr.l1(&f, 1, 0));
        let ku = tr.apply_k(&f);
        assert!(tr.tau_inv_l1(&ku, 1, 0) <= 1.02 * rep.sup_tau_sigma * tr.tau_inv_l1(&f, 1, 0));
    }
}

#[test]
fn k_on_a_single_node_matches_composition() {
    let sys = magnetic();
    let (g, inc, _) = grids(&sys, 16);
    let pair = AdmissiblePair::new(
        Attenuation::isotropic(|x| 0.4 * cutoff(x)),
        ScatteringKernel::from_fn(|x, eta, xi| 0.1 * cutoff(x) * (1.0 + 0.5 * eta.dot(xi))),
        0.9,
    );
    let tr = Transport::new(&sys, &pair, &g, &inc, opts()).unwrap();
    let m = 37 * 16 + 5;
    let mut e = vec![0.0; tr.len()];
    e[m] = 1.0;
    let ku = tr.apply_k(&e);
    // hand composition: (K e_m)(q) = Σ_l T₀⁻¹[q, (s, i)] k(x_s, e_m, e_i) w_m
    let s = m / 16;
    let x = g.spatial.nodes[s];
    for q in [m, 3, 200, 700] {
        let mut v = 0.0;
        for (col, t) in tr.rays.t0inv.row(q) {
            if col / 16 == s {
                let i = col % 16;
                v += t * pair.k.eval(&x, &g.fiber.dirs[m % 16], &g.fiber.dirs[i]) * g.fiber.weights[m % 16];
            }
        }
        assert!((ku[q] - v).abs() < 1e-14);
    }
}

#[test]
fn subcritical_examples() {
    let sys = MagneticSystem::flat(2).with_step(5e-3);
    let (g, inc, _) = grids(&sys, 16);
    let fine = FiberGrid::new(2, &[64]).unwrap();
    let check = |a: f64, sigma: f64| {
        let pair = AdmissiblePair::new(
            Attenuation::isotropic(move |_| a),
            ScatteringKernel::isotropic(move |_| sigma / (2.0 * PI)),
            1.0,
        );
        Transport::new(&sys, &pair, &g, &inc, opts()).unwrap().subcritical(&fine)
    };
    let r = check(0.5, 0.1);
    assert!(r.sup_tau_sigma <= 0.2 + 1e-9 && r.cond1);
    assert!((r.min_gap - 0.4).abs() < 1e-9 && r.cond2);
    let r = check(0.5, 0.6);
    assert!(r.sup_tau_sigma > 1.0 && !r.cond1);
    let r = check(0.0, 0.1);
    assert!(!r.cond2);
    let r = check(0.6, 0.6);
    assert!(r.cond2 && !r.cond1);
    assert!(r.c0 > 0.0 && r.diam <= 2.0 + 1e-9);
}

#[test]
fn solvers_agree_and_refuse() {
    let sys = magnetic();
    let (g, inc, _) = grids(&sys, 16);
    let fine = FiberGrid::new(2, &[64]).unwrap();
    let vac = AdmissiblePair::vacuum();
    let tv = Transport::new(&sys, &vac, &g, &inc, opts()).unwrap();
    let u_plus = BoundaryFlux::from_fn(&inc, |p| 1.0 + p.x[0]);
    let rv = tv.subcritical(&fine);
    let (u, rep) = tv.solve_forward(&u_plus, SolveMode::Neumann, &rv, false).unwrap();
    assert_eq!(rep.terms, 1);
    assert_eq!(u, tv.apply_j(&u_plus));

    let pair = balanced(0.3);
    let tr = Transport::new(&sys, &pair, &g, &inc, opts()).unwrap();
    let rep = tr.subcritical(&fine);
    assert!(rep.cond1);
    let (un, sn) = tr.solve_forward(&u_plus, SolveMode::Neumann, &rep, false).unwrap();
    let (ud, sd) = tr.solve_forward(&u_plus, SolveMode::Direct, &rep, false).unwrap();
    let diff: Vec<f64> = un.iter().zip(&ud).map(|(a, b)| a - b).collect();
    assert!(tr.tau_inv_l1(&diff, 1, 0) < 1e-6 * tr.tau_inv_l1(&ud, 1, 0));
    assert!(sn.residual < 1e-9 && sd.residual < 1e-9);
    assert!(un.iter().all(|v| *v >= -1e-8), "maximum principle");

    let hot = AdmissiblePair::new(
        Attenuation::isotropic(|x| 0.6 * cutoff(x)),
        ScatteringKernel::isotropic(|x| 0.8 / (2.0 * PI) * cutoff(x)),
        0.9,
    );
    let th = Transport::new(&sys, &hot, &g, &inc, opts()).unwrap();
    let rh = th.subcritical(&fine);
    assert!(!rh.cond1 && !rh.cond2);
    assert!(matches!(th.solve_forward(&u_plus, SolveMode::Neumann, &rh, false), Err(magrt::Error::Refused(_))));
    assert!(matches!(th.solve_forward(&u_plus, SolveMode::Direct, &rh, false), Err(magrt::Error::Refused(_))));
}

#[test]
fn balanced_case_identity_and_norm() {
    let sys = MagneticSystem::flat(2).with_step(5e-3);
    let (g, inc, _) = grids(&sys, 16);
    let fine = FiberGrid::new(2, &[64]).unwrap();
    let pair = AdmissiblePair::new(
        Attenuation::isotropic(|_| 0.6),
        ScatteringKernel::isotropic(|_| 0.6 / (2.0 * PI)),
        1.0,
    );
    let tr = Transport::new(&sys, &pair, &g, &inc, opts()).unwrap();
    let rep = tr.subcritical(&fine);
    assert!(rep.cond2 && !rep.cond1);
    let norm = tr.t1_t0inv_norm();
    let bound = 1.0 - (-2.4f64).exp();
    assert!(norm > 0.0 && norm <= bound * 1.02, "{norm} vs {bound}");
    assert!(tr.t1_t0inv_column_max() >= norm * (1.0 - 1e-9));
    let u_plus = BoundaryFlux::from_fn(&inc, |p| (2.0 * p.x[1]).cos() + 1.5);
    let (u, _) = tr.solve_forward(&u_plus, SolveMode::Direct, &rep, false).unwrap();
    assert!(tr.identity_residual(&u).unwrap() < 1e-6);
    let vac = AdmissiblePair::vacuum();
    assert_eq!(Transport::new(&sys, &vac, &g, &inc, opts()).unwrap().t1_t0inv_norm(), 0.0);
}

#[test]
fn conservation_and_trace_bounds() {
    let sys = magnetic();
    let (g, inc, out) = grids(&sys, 16);
    let u_plus = BoundaryFlux::from_fn(&inc, |p| 1.0 + 0.5 * p.x[0]);
    let fine = FiberGrid::new(2, &[64]).unwrap();
    let mut masses = Vec::new();
    for (a, s) in [(0.5, 0.5), (0.7, 0.3)] {
        let pair = AdmissiblePair::new(
            Attenuation::isotropic(move |x| a * cutoff(x)),
            ScatteringKernel::isotropic(move |x| s / (2.0 * PI) * cutoff(x)),
            0.9,
        );
        let tr = Transport::new(&sys, &pair, &g, &inc, opts()).unwrap();
        let rep = tr.subcritical(&fine);
        let (u, _) = tr.solve_forward(&u_plus, SolveMode::Direct, &rep, false).unwrap();
        let rays = tr.outgoing_rays(&out).unwrap();
        let uo = tr.outgoing_block(&rays, &u_plus.values, &u, 1);
        let mass: f64 = uo.iter().zip(&out.weights).map(|(v, w)| v.abs() * w).sum();
        masses.push(mass);
        // trace bound with G_μ u = −a u + T₁ u
        let t1u = tr.apply_t1(&u);
        let gu: Vec<f64> = (0..tr.len())
            .map(|q| -pair.a.at(&sys, &g.phase(q)) * u[q] + t1u[q])
            .collect();
        assert!(mass <= 1.05 * (tr.l1(&gu, 1, 0) + tr.tau_inv_l1(&u, 1, 0)));
    }
    let incoming = u_plus.l1(&inc);
    assert!(masses[0] <= 1.01 * incoming, "{} vs {incoming}", masses[0]);
    assert!(masses[1] < masses[0]);
}

#[test]
fn neumann_tail_bound() {
    let sys = magnetic();
    let (g, inc, _) = grids(&sys, 16);
    let pair = balanced(0.3);
    let tr = Transport::new(&sys, &pair, &g, &inc, opts()).unwrap();
    let rep = tr.subcritical(&FiberGrid::new(2, &[64]).unwrap());
    let u_plus = BoundaryFlux::from_fn(&inc, |p| 1.0 + p.x[1]);
    let rhs = tr.apply_j(&u_plus);
    let exact = tr.direct_block(&rhs, 1).unwrap();
    let q = rep.sup_tau_sigma;
    for terms in [2, 3, 5] {
        let mut u = rhs.clone();
        let mut t = rhs.clone();
        for _ in 1..terms {
            t = tr.apply_k(&t).iter().map(|v| -v).collect();
            for (a, b) in u.iter_mut().zip(&t) {
                *a += b;
            }
        }
        let err: Vec<f64> = u.iter().zip(&exact).map(|(a, b)| a - b).collect();
        let bound = q.powi(terms) / (1.0 - q) * tr.tau_inv_l1(&rhs, 1, 0);
        assert!(tr.tau_inv_l1(&err, 1, 0) <= bound, "terms {terms}");
    }
}

#[test]
fn ray_table_for_boundary_starts() {
    let sys = magnetic();
    let (g, inc, _) = grids(&sys, 16);
    let pair = balanced(0.3);
    let rt = RayTable::build(&sys, &pair.a, Some(&g), &inc, &inc.nodes, opts()).unwrap();
    for q in 0..rt.len() {
        assert_eq!(rt.tau_minus[q], 0.0);
        assert_eq!(rt.e_total[q], 1.0);
        assert_eq!(rt.t0inv.row(q).count(), 0);
        assert!(rt.tau_plus[q] > 0.0);
    }
    let p = PhasePoint { x: Vec3::new(0.0, 0.0, 0.0), xi: Vec3::new(1.0, 0.0, 0.0) };
    assert!(RayTable::build(&sys, &pair.a, None, &inc, &[p], opts()).unwrap().t0inv.nnz() == 0);
}
