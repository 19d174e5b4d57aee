use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use magrt::albedo::{ballistic_albedo, build_albedo, AlbedoOptions};
use magrt::expr::bump;
use magrt::geometry::{MagneticSystem, Vec3};
use magrt::par;
use magrt::phase_space::{BoundaryGrid, Side, SphereBundleGrid};
use magrt::transport::{AdmissiblePair, Attenuation, RayOptions, ScatteringKernel};

fn setup() -> (MagneticSystem, AdmissiblePair, SphereBundleGrid, BoundaryGrid, BoundaryGrid) {
    let sys = MagneticSystem::flat(2).with_constant_b(0.3).with_step(5e-3);
    let pair = AdmissiblePair::new(
        Attenuation::isotropic(|x: &Vec3| 0.5 * bump(x.norm() / 0.9)),
        ScatteringKernel::isotropic(|x: &Vec3| 0.05 * bump(x.norm() / 0.9)),
        0.9,
    );
    let grid = SphereBundleGrid::new(&sys, &[8, 16], &[16]).unwrap();
    let inc = BoundaryGrid::new(&sys, Side::Incoming, &[24], &[16], 1e-3).unwrap();
    let out = BoundaryGrid::new(&sys, Side::Outgoing, &[24], &[16], 1e-3).unwrap();
    (sys, pair, grid, inc, out)
}

fn modes() -> [(&'static str, bool); 2] {
    [("parallel", false), ("sequential", true)]
}

fn ballistic(c: &mut Criterion) {
    let (sys, pair, _, inc, out) = setup();
    let ray = RayOptions { spacing: 0.05, forward: true };
    let mut g = c.benchmark_group("ballistic_albedo");
    for (name, seq) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::force_sequential(seq);
            b.iter(|| ballistic_albedo(&sys, &pair.a, &inc, &out, ray).unwrap());
        });
    }
    par::force_sequential(false);
    g.finish();
}

fn scattering(c: &mut Criterion) {
    let (sys, pair, grid, inc, out) = setup();
    let opts = AlbedoOptions { ray: RayOptions { spacing: 0.05, forward: true }, ..Default::default() };
    let mut g = c.benchmark_group("scattering_albedo");
    for (name, seq) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::force_sequential(seq);
            b.iter(|| build_albedo(&sys, &pair, Some(&grid), &inc, &out, &opts).unwrap());
        });
    }
    par::force_sequential(false);
    g.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10).measurement_time(Duration::from_secs(5));
    targets = ballistic, scattering
}
criterion_main!(benches);
