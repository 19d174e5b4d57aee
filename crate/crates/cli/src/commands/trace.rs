use std::f64::consts::PI;

use magrt::geometry::{random_phase_point, simplicity_check, MagneticSystem, PhasePoint, SimplicityOptions};
use magrt::Vec3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{vec3, Checks};
use crate::artifact::Sink;
use crate::error::CliError;
use crate::json::Json;
use crate::scenario::{parse_expr, Scenario};

const ORBIT_TOL: f64 = 1e-6;
const EXIT_TOL: f64 = 1e-6;
const FLOW_TOL: f64 = 1e-7;

/// Forward and backward arc lengths from `x` (heading `e`) to the unit circle
/// along the counterclockwise circle of radius `rad`.
fn circle_exits(x: [f64; 2], e: [f64; 2], rad: f64) -> Option<(f64, f64)> {
    let c = [x[0] - rad * e[1], x[1] + rad * e[0]];
    let d2 = c[0] * c[0] + c[1] * c[1];
    let d = d2.sqrt();
    let a = (1.0 - rad * rad + d2) / (2.0 * d);
    let h2 = 1.0 - a * a;
    if !(h2 > 0.0) {
        return None;
    }
    let h = h2.sqrt();
    let base = [a * c[0] / d, a * c[1] / d];
    let hits = [[base[0] + h * c[1] / d, base[1] - h * c[0] / d], [base[0] - h * c[1] / d, base[1] + h * c[0] / d]];
    let angle = |p: [f64; 2]| (p[1] - c[1]).atan2(p[0] - c[0]);
    let a0 = angle(x);
    let ccw = |p: [f64; 2]| (angle(p) - a0).rem_euclid(2.0 * PI);
    let near = |p: [f64; 2]| (p[0] - x[0]).hypot(p[1] - x[1]) < 1e-9;
    // a start on the boundary is one of the two intersections
    if let Some(other) = hits.iter().find(|p| !near(**p)).filter(|_| hits.iter().any(|p| near(*p))) {
        let arc = ccw(*other);
        let inward = x[0] * e[0] + x[1] * e[1] < 0.0;
        return Some(if inward { (arc * rad, 0.0) } else { (0.0, (2.0 * PI - arc) * rad) });
    }
    let (u, v) = (ccw(hits[0]), ccw(hits[1]));
    Some((u.min(v) * rad, (2.0 * PI - u.max(v)) * rad))
}

fn phase_distance(a: &PhasePoint, b: &PhasePoint) -> f64 {
    (a.x - b.x).norm().max((a.xi - b.xi).norm())
}

pub fn run(s: &Scenario, sink: &Sink, report: &mut Json, checks: &mut Checks) -> Result<(), CliError> {
    let sys = s.system()?;
    let spec = &s.run.trace;
    if spec.simplicity {
        let opts = SimplicityOptions { seed: s.run.seed, ..Default::default() };
        let r = simplicity_check(&sys, &opts);
        report.push(
            "simplicity",
            Json::obj()
                .field("pass", r.pass)
                .field("convex", r.convex)
                .field("convexity_margin", r.convexity_margin)
                .field("trapped", r.trapped)
                .field("shooting_failures", r.shooting_failures)
                .field("min_jacobian_det", r.min_jacobian_det),
        );
        if !r.pass {
            return Err(CliError::Refused(format!(
                "system is not simple (margin {:e}, trapped {}, shooting failures {})",
                r.convexity_margin, r.trapped, r.shooting_failures
            )));
        }
    }

    let starts = starting_points(s, &sys)?;
    // constant planar field on the flat disk: orbits are circles of radius 1/b
    let flat_b = match (parse_expr(&s.system.conformal)?.as_constant(), s.system.field.as_deref()) {
        (Some(c), Some(f)) if c == 1.0 && s.system.dim == 2 => parse_expr(f)?.as_constant().filter(|b| *b > 0.0),
        _ => None,
    };

    let [t, u] = spec.flow_times;
    let mut rows = Vec::new();
    let mut paths = Vec::new();
    let (mut orbit_dev, mut exit_err, mut flow_err, mut cocycle_err) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for (k, p) in starts.iter().enumerate() {
        let path = sys.trace(p)?;
        for smp in &path.samples {
            rows.push(vec![k as f64, smp.t, smp.x[0], smp.x[1], smp.x[2], smp.v[0], smp.v[1], smp.v[2]]);
        }
        let mut entry = Json::obj()
            .field("x", vec3(&p.x))
            .field("xi", vec3(&p.xi))
            .field("tau_minus", path.tau_minus)
            .field("tau_plus", path.tau_plus)
            .field("exit_minus", vec3(&path.exit_minus.x))
            .field("exit_plus", vec3(&path.exit_plus.x));

        if let Some(b) = flat_b {
            let rad = 1.0 / b;
            let e = p.xi;
            let c = p.x + rad * Vec3::new(-e[1], e[0], 0.0);
            let dev = path.samples.iter().map(|q| ((q.x - c).norm() - rad).abs()).fold(0.0, f64::max);
            orbit_dev = orbit_dev.max(dev);
            if let Some((fwd, bwd)) = circle_exits([p.x[0], p.x[1]], [e[0], e[1]], rad) {
                let err = (path.tau_plus - fwd).abs().max((path.tau_minus + bwd).abs());
                exit_err = exit_err.max(err);
                entry.push("oracle_tau_plus", fwd);
                entry.push("oracle_tau_minus", -bwd);
            }
        }

        let group = phase_distance(&sys.flow(&sys.flow(p, t), u), &sys.flow(p, t + u));
        flow_err = flow_err.max(group);
        if t < path.tau_plus && -t > path.tau_minus {
            let q = sys.flow(p, t);
            let (qm, qp) = sys.exit_times(&q)?;
            let c = (qp - (path.tau_plus - t)).abs().max((qm - (path.tau_minus - t)).abs());
            cocycle_err = cocycle_err.max(c);
            entry.push("cocycle_error", c);
        }
        entry.push("flow_group_error", group);
        paths.push(entry);
    }
    sink.write_csv("paths", &["path", "t", "x1", "x2", "x3", "v1", "v2", "v3"], &rows)?;
    report.push("paths", Json::Arr(paths));
    if flat_b.is_some() {
        checks.at_most("orbit_radius_deviation", orbit_dev, ORBIT_TOL);
        checks.at_most("exit_time_error", exit_err, EXIT_TOL);
    }
    checks.at_most("flow_group_error", flow_err, FLOW_TOL);
    checks.at_most("exit_time_cocycle_error", cocycle_err, FLOW_TOL);
    Ok(())
}

fn starting_points(s: &Scenario, sys: &MagneticSystem) -> Result<Vec<PhasePoint>, CliError> {
    let spec = &s.run.trace;
    if spec.starts.is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(s.run.seed);
        return Ok((0..spec.count).map(|_| random_phase_point(sys, &mut rng, 0.5)).collect());
    }
    if spec.directions.len() != spec.starts.len() {
        return Err(CliError::Config("run.trace.starts and run.trace.directions must have the same length".into()));
    }
    spec.starts
        .iter()
        .zip(&spec.directions)
        .map(|(x, d)| {
            let x = Vec3::new(x[0], x[1], x[2]);
            let d = Vec3::new(d[0], d[1], d[2]);
            if x.norm() > 1.0 || d.norm() == 0.0 {
                return Err(CliError::Config("trace starts must lie in the closed ball with nonzero directions".into()));
            }
            Ok(sys.phase(x, d))
        })
        .collect()
}
