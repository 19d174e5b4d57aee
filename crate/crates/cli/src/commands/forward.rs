use magrt::expr::Vars;
use magrt::phase_space::{BoundaryFlux, FiberGrid};
use magrt::transport::{SolveMode, Transport};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Checks;
use crate::artifact::Sink;
use crate::error::CliError;
use crate::json::Json;
use crate::scenario::{parse_expr, Scenario};

/// Relative quadrature slack on the operator bounds.
const SLACK: f64 = 0.02;
const AGREEMENT_TOL: f64 = 1e-6;
const IDENTITY_TOL: f64 = 1e-6;

pub fn run(s: &Scenario, sink: &Sink, report: &mut Json, checks: &mut Checks) -> Result<(), CliError> {
    let sys = s.system()?;
    let pair = s.pair()?;
    let grid = s.phase_grid(&sys)?;
    let (inc, _) = s.boundary(&sys)?;
    let spec = &s.run.forward;
    let tr = Transport::new(&sys, &pair, &grid, &inc, s.ray())?;
    let fine = FiberGrid::new(sys.dim, if sys.dim == 2 { &[64][..] } else { &[16, 32][..] })?;
    let sub = tr.subcritical(&fine);
    report.push(
        "subcritical",
        Json::obj()
            .field("sup_tau_sigma", sub.sup_tau_sigma)
            .field("min_gap", sub.min_gap)
            .field("sup_sigma", sub.sup_sigma)
            .field("cond1", sub.cond1)
            .field("cond2", sub.cond2)
            .field("c0", sub.c0)
            .field("diam", sub.diam),
    );

    // operator bounds on random signed fields
    let mut rng = ChaCha8Rng::seed_from_u64(s.run.seed);
    let (mut r0, mut r1) = (0.0f64, 0.0f64);
    for _ in 0..spec.lemma_samples {
        let f: Vec<f64> = (0..tr.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = tr.l1(&f, 1, 0);
        r0 = r0.max(tr.tau_inv_l1(&tr.apply_t0_inv(&f), 1, 0) / norm);
        let tf: Vec<f64> = f.iter().zip(&tr.tau).map(|(v, t)| v * t).collect();
        let bound = sub.sup_tau_sigma * norm;
        r1 = r1.max(if bound > 0.0 { tr.l1(&tr.apply_t1(&tf), 1, 0) / bound } else { 0.0 });
    }
    if spec.lemma_samples > 0 {
        checks.at_most("tau_inv_t0_inv_ratio", r0, 1.0 + SLACK);
        checks.at_most("t1_tau_ratio", r1, 1.0 + SLACK);
    }

    if spec.norm {
        let est = tr.t1_t0inv_norm();
        let bound = 1.0 - (-2.0 * sub.sup_sigma * sub.diam).exp();
        report.push("t1_t0inv_norm", est);
        report.push("t1_t0inv_bound", bound);
        checks.at_most("t1_t0inv_norm", est, bound * (1.0 + SLACK));
    }

    let e = parse_expr(&spec.incoming)?;
    let u_plus = BoundaryFlux::from_fn(&inc, |p| {
        let d = p.xi * sys.c(&p.x).sqrt();
        e.eval(&Vars { x: [p.x[0], p.x[1], p.x[2]], xi: [d[0], d[1], d[2]], eta: [0.0; 3] })
    });
    let mode = s.mode();
    let (u, rep) = tr.solve_forward(&u_plus, mode, &sub, s.run.force)?;
    report.push(
        "solve",
        Json::obj()
            .field("mode", format!("{:?}", rep.mode).to_lowercase())
            .field("terms", rep.terms)
            .field("residual", rep.residual)
            .field("tau_inv_l1", tr.tau_inv_l1(&u, 1, 0)),
    );

    if spec.compare {
        let other = if mode == SolveMode::Neumann { SolveMode::Direct } else { SolveMode::Neumann };
        let (v, _) = tr.solve_forward(&u_plus, other, &sub, s.run.force)?;
        let diff: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a - b).collect();
        let rel = tr.tau_inv_l1(&diff, 1, 0) / tr.tau_inv_l1(&u, 1, 0).max(f64::MIN_POSITIVE);
        report.push("solver_difference", rel);
        checks.at_most("solver_difference", rel, AGREEMENT_TOL);
    }
    if spec.identity {
        let r = tr.identity_residual(&u)?;
        report.push("identity_residual", r);
        checks.at_most("identity_residual", r, IDENTITY_TOL);
    }

    let rows: Vec<Vec<f64>> = (0..tr.len())
        .map(|i| {
            let p = grid.phase(i);
            vec![p.x[0], p.x[1], p.x[2], p.xi[0], p.xi[1], p.xi[2], u[i]]
        })
        .collect();
    sink.write_csv("solution", &["x1", "x2", "x3", "xi1", "xi2", "xi3", "u"], &rows)?;
    Ok(())
}
