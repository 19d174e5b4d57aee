use magrt::expr::Vars;
use magrt::geometry::PhasePoint;
use magrt::phase_space::santalo_check;

use super::Checks;
use crate::artifact::Sink;
use crate::error::CliError;
use crate::json::Json;
use crate::scenario::{parse_expr, Scenario};

const DEFAULT_TOL: f64 = 1e-2;

pub fn run(s: &Scenario, sink: &Sink, report: &mut Json, checks: &mut Checks) -> Result<(), CliError> {
    let sys = s.system()?;
    let grid = s.phase_grid(&sys)?;
    let (inc, out) = s.boundary(&sys)?;
    let spec = &s.run.santalo;
    let tol = spec.max_discrepancy.unwrap_or(DEFAULT_TOL);
    let mut rows = Vec::new();
    let mut items = Vec::new();
    for (k, src) in spec.integrands.iter().enumerate() {
        let e = parse_expr(src)?;
        let sys_ref = &sys;
        let f = move |p: &PhasePoint| {
            let dir = p.xi * sys_ref.c(&p.x).sqrt();
            e.eval(&Vars { x: [p.x[0], p.x[1], p.x[2]], xi: [dir[0], dir[1], dir[2]], eta: [0.0; 3] })
        };
        let r = santalo_check(&sys, &grid, &inc, &out, s.grids.ray_spacing, &f)?;
        rows.push(vec![k as f64, r.lhs, r.rhs_plus, r.rhs_minus, r.max_discrepancy()]);
        let mut item = Json::obj()
            .field("integrand", src.as_str())
            .field("lhs", r.lhs)
            .field("rhs_plus", r.rhs_plus)
            .field("rhs_minus", r.rhs_minus)
            .field("discrepancies", r.discrepancies.to_vec())
            .field("max_discrepancy", r.max_discrepancy());
        checks.at_most(&format!("discrepancy[{k}]"), r.max_discrepancy(), tol);
        if k == 0 {
            if let Some(exact) = spec.exact {
                let rel = [r.lhs, r.rhs_plus, r.rhs_minus].iter().map(|v| (v / exact - 1.0).abs()).fold(0.0, f64::max);
                item.push("exact", exact);
                item.push("max_relative_error", rel);
                checks.at_most("relative_error_to_exact", rel, tol);
            }
        }
        items.push(item);
    }
    sink.write_csv("integrals", &["integrand", "lhs", "rhs_plus", "rhs_minus", "max_discrepancy"], &rows)?;
    report.push("integrands", Json::Arr(items));
    Ok(())
}
