use std::f64::consts::PI;

use magrt::geometry::{MagneticSystem, PhasePoint, ScalarField, Vec3};
use magrt::phase_space::*;
use proptest::prelude::*;

fn conformal() -> MagneticSystem {
    MagneticSystem::flat(2).with_conformal(ScalarField::from_fn(|x| 1.0 + 0.2 * x.norm_squared()))
}

#[test]
fn flat_disk_phase_volume() {
    let sys = MagneticSystem::flat(2);
    let g = SphereBundleGrid::new(&sys, &[12, 24], &[32]).unwrap();
    let v = integrate_sm(&g, |_| 1.0);
    assert!((v / (2.0 * PI * PI) - 1.0).abs() < 1e-3, "{v}");
}

#[test]
fn ball_phase_volume() {
    let sys = MagneticSystem::flat(3);
    let g = SphereBundleGrid::new(&sys, &[6, 6, 12], &[6, 12]).unwrap();
    let v = integrate_sm(&g, |_| 1.0);
    let exact = 4.0 / 3.0 * PI * 4.0 * PI;
    assert!((v / exact - 1.0).abs() < 1e-9, "{v}");
}

#[test]
fn boundary_measure_totals() {
    let sys = MagneticSystem::flat(2);
    let inc = BoundaryGrid::new(&sys, Side::Incoming, &[48], &[32], 1e-3).unwrap();
    let out = BoundaryGrid::new(&sys, Side::Outgoing, &[48], &[32], 1e-3).unwrap();
    assert!((inc.total_measure() - 4.0 * PI).abs() < 1e-9);
    assert!((inc.total_measure() - out.total_measure()).abs() < 1e-6);
    let s3 = MagneticSystem::flat(3);
    let b3 = BoundaryGrid::new(&s3, Side::Incoming, &[12, 24], &[8, 16], 1e-3).unwrap();
    assert!((b3.total_measure() - 4.0 * PI * PI).abs() < 1e-9);
    // g-measure picks up c^{(n−1)/2} on the boundary
    let bc = BoundaryGrid::new(&conformal(), Side::Incoming, &[48], &[32], 1e-3).unwrap();
    assert!((bc.total_measure() - 4.0 * PI * 1.2f64.sqrt()).abs() < 1e-9);
}

#[test]
fn boundary_nodes_point_the_right_way() {
    let sys = conformal();
    for side in [Side::Incoming, Side::Outgoing] {
        let b = BoundaryGrid::new(&sys, side, &[16], &[8], 1e-3).unwrap();
        for p in &b.nodes {
            let normal = p.xi.dot(&p.x) * sys.c(&p.x).sqrt();
            let signed = if side == Side::Incoming { -normal } else { normal };
            assert!(signed > 1e-3);
            assert!((sys.g_norm(&p.x, &p.xi) - 1.0).abs() < 1e-12);
        }
    }
    assert!(BoundaryGrid::new(&sys, Side::Incoming, &[16], &[40], 0.3).is_err());
}

#[test]
fn conformal_volume_matches_refined_grid() {
    let sys = conformal();
    let coarse = SphereBundleGrid::new(&sys, &[10, 16], &[4]).unwrap();
    let fine = SphereBundleGrid::new(&sys, &[40, 64], &[4]).unwrap();
    let vc: f64 = coarse.volume.iter().sum();
    let vf: f64 = fine.volume.iter().sum();
    // ∫ (1 + 0.2 r²) r dr dθ = π (1 + 0.1)
    assert!((vf - 1.1 * PI).abs() < 1e-12);
    assert!((vc / vf - 1.0).abs() < 1e-4);
}

#[test]
fn santalo_flat_constant() {
    let sys = MagneticSystem::flat(2);
    let g = SphereBundleGrid::new(&sys, &[12, 24], &[32]).unwrap();
    let inc = BoundaryGrid::new(&sys, Side::Incoming, &[24], &[32], 1e-3).unwrap();
    let out = BoundaryGrid::new(&sys, Side::Outgoing, &[24], &[32], 1e-3).unwrap();
    let r = santalo_check(&sys, &g, &inc, &out, 0.05, &|_| 1.0).unwrap();
    let exact = 2.0 * PI * PI;
    for v in [r.lhs, r.rhs_plus, r.rhs_minus] {
        assert!((v / exact - 1.0).abs() < 1e-2, "{v}");
    }
    assert!(r.max_discrepancy() < 1e-2);
    let z = santalo_check(&sys, &g, &inc, &out, 0.05, &|_| 0.0).unwrap();
    assert_eq!((z.lhs, z.rhs_plus, z.rhs_minus), (0.0, 0.0, 0.0));
}

#[test]
fn santalo_magnetic_radial_weight() {
    let sys = MagneticSystem::flat(2).with_constant_b(0.3).with_step(5e-3);
    let g = SphereBundleGrid::new(&sys, &[12, 24], &[32]).unwrap();
    let inc = BoundaryGrid::new(&sys, Side::Incoming, &[24], &[32], 1e-3).unwrap();
    let out = BoundaryGrid::new(&sys, Side::Outgoing, &[24], &[32], 1e-3).unwrap();
    let r = santalo_check(&sys, &g, &inc, &out, 0.05, &|p: &PhasePoint| p.x.norm_squared()).unwrap();
    assert!(r.max_discrepancy() < 1e-2, "{r:?}");
}

#[test]
fn fiber_mollifier_has_unit_mass() {
    for dim in [2, 3] {
        let fine = FiberGrid::new(dim, if dim == 2 { &[4000][..] } else { &[200, 400][..] }).unwrap();
        for eps in [0.5, 0.3] {
            let c = if dim == 2 { Vec3::new(0.6, 0.8, 0.0) } else { Vec3::new(0.6, 0.0, 0.8) };
            let m = FiberMollifier::new(dim, c, eps);
            let mass: f64 = fine.dirs.iter().zip(&fine.weights).map(|(e, w)| w * m.eval(e)).sum();
            assert!((mass - 1.0).abs() < 1e-3, "dim {dim} eps {eps}: {mass}");
        }
    }
    assert!((fiber_bump_mass(2, 1e-3) / (1e-3 * BUMP_MASS) - 1.0).abs() < 1e-6);
}

#[test]
fn w_eps_unit_mass() {
    let sys = MagneticSystem::flat(2).with_constant_b(0.3);
    let inc = BoundaryGrid::new(&sys, Side::Incoming, &[48], &[32], 1e-3).unwrap();
    let center = inc.nodes[100];
    for eps in [0.2, 0.1, 0.05] {
        let w = delta_family_w(&sys, &inc, eps, &center).unwrap();
        assert!((w.integral(&inc) - 1.0).abs() < 1e-6);
        assert!(w.values.iter().all(|v| *v >= 0.0));
    }
    let tiny = delta_family_w(&sys, &inc, 1e-6, &center).unwrap();
    assert!((tiny.l1(&inc) - 1.0).abs() < 1e-12);
}

fn frame_system() -> MagneticSystem {
    MagneticSystem::flat(3).with_constant_b(0.3).with_step(5e-3)
}

#[test]
fn h1_vanishes_on_z() {
    let sys = frame_system();
    let y = Vec3::new(0.1, -0.05, 0.2);
    let eta = Vec3::new(1.0, 0.0, 0.0);
    let eta_p = Vec3::new(0.2, 1.0, 0.3).normalize();
    let f = ScatterFrame::new(&sys, y, eta_p, eta).unwrap();
    let e2 = (eta_p - eta_p.dot(&eta) * eta).normalize();
    for k in 0..20 {
        let th = 2.0 * PI * k as f64 / 20.0 + 0.1;
        let dir = th.cos() * eta + th.sin() * e2;
        let (_, z) = sys.exit(&PhasePoint { x: y, xi: dir }, -1.0).unwrap();
        assert!(f.h1(&sys, &z.x).unwrap() < 1e-6);
    }
    let off = Vec3::new(0.0, 0.0, 1.0);
    assert!(f.h1(&sys, &off).unwrap() > 1e-2);
}

#[test]
fn h2_properties() {
    let sys = frame_system();
    let y = Vec3::new(0.0, 0.1, 0.0);
    let f = ScatterFrame::new(&sys, y, Vec3::new(0.0, 0.6, 0.8), Vec3::new(1.0, 0.0, 0.0)).unwrap();
    assert!(f.h2(&sys, &f.x_star.x).unwrap().abs() < 1e-7);
    let ds = 1e-3;
    let d = (f.h2(&sys, &f.h_curve(&sys, ds).unwrap().x).unwrap() - f.h2(&sys, &f.h_curve(&sys, -ds).unwrap().x).unwrap())
        / (2.0 * ds);
    assert!(f.eta_star_norm2 > 0.0);
    assert!((d / f.eta_star_norm2 - 1.0).abs() < 1e-4, "{d} vs {}", f.eta_star_norm2);
    assert!(f.chi_delta(&sys, 0.1, &f.x_star.x).unwrap() > 0.0);
    assert!((f.phi_rho(&sys, 0.1, &f.x_star.x).unwrap() - 1.0).abs() < 1e-9);
}

#[test]
fn degenerate_frame_rejected() {
    let sys = frame_system();
    let e = Vec3::new(1.0, 0.0, 0.0);
    assert!(ScatterFrame::new(&sys, Vec3::zeros(), e, e).is_err());
    assert!(ScatterFrame::new(&sys, Vec3::zeros(), -e, e).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stencils_are_partitions_of_unity(r in 0.0f64..1.0, a in -4.0f64..4.0, b in -1.0f64..1.0, s in -0.99f64..0.99) {
        let sys = MagneticSystem::flat(3);
        let g = SphereBundleGrid::new(&sys, &[4, 4, 8], &[4, 8]).unwrap();
        let st = b.clamp(-1.0, 1.0);
        let x = r * Vec3::new((1.0 - st * st).sqrt() * a.cos(), (1.0 - st * st).sqrt() * a.sin(), st);
        let p = PhasePoint { x, xi: Vec3::new(a.sin(), b, 0.5).normalize() };
        let w: f64 = g.stencil(&p).iter().map(|(_, w)| w).sum();
        prop_assert!((w - 1.0).abs() < 1e-12);
        let inc = BoundaryGrid::new(&sys, Side::Incoming, &[4, 8], &[4, 8], 1e-3).unwrap();
        let xb = x.normalize();
        let (e1, _) = tangent_frame(3, &xb);
        let e = -(1.0 - s * s).sqrt() * xb + s * e1;
        let q = PhasePoint { x: xb, xi: e };
        let w: f64 = inc.stencil(&sys, &q).iter().map(|(_, w)| w).sum();
        prop_assert!((w - 1.0).abs() < 1e-12);
    }

    #[test]
    fn boundary_stencil_reproduces_nodes(k in 0usize..(16 * 8)) {
        let sys = MagneticSystem::flat(2);
        let inc = BoundaryGrid::new(&sys, Side::Incoming, &[16], &[8], 1e-3).unwrap();
        let st = inc.stencil(&sys, &inc.nodes[k]);
        let hit: Vec<(usize, f64)> = st.iter().filter(|(_, w)| *w > 1e-9).collect();
        prop_assert_eq!(hit.len(), 1);
        prop_assert_eq!(hit[0].0, k);
    }
}
