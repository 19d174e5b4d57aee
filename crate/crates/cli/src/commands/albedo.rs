use magrt::albedo::{build_albedo, AlbedoOperator, AlbedoOptions, AlbedoReport};
use magrt::phase_space::BoundaryGrid;
use magrt::transport::AdmissiblePair;
use magrt::MagneticSystem;

use super::Checks;
use crate::artifact::{grid_hash, write_matrix, Sink};
use crate::error::CliError;
use crate::json::Json;
use crate::scenario::Scenario;

pub(super) fn options(s: &Scenario) -> AlbedoOptions {
    AlbedoOptions { mode: s.mode(), ray: s.ray(), force: s.run.force, ..Default::default() }
}

/// Albedo of `pair` on the scenario grids; the phase grid is only built when there is scattering.
pub(super) fn simulate(
    s: &Scenario,
    sys: &MagneticSystem,
    pair: &AdmissiblePair,
    inc: &BoundaryGrid,
    out: &BoundaryGrid,
) -> Result<(AlbedoOperator, AlbedoReport), CliError> {
    let grid = if pair.k.is_zero() { None } else { Some(s.phase_grid(sys)?) };
    Ok(build_albedo(sys, pair, grid.as_ref(), inc, out, &options(s))?)
}

pub(super) fn describe(rep: &AlbedoReport) -> Json {
    let mut j = Json::obj().field("nnz", rep.nnz);
    if let Some(sub) = &rep.subcritical {
        j.push("sup_tau_sigma", sub.sup_tau_sigma);
        j.push("min_gap", sub.min_gap);
        j.push("cond1", sub.cond1);
        j.push("cond2", sub.cond2);
    }
    if let Some(sol) = &rep.solve {
        j.push("mode", format!("{:?}", sol.mode).to_lowercase());
        j.push("terms", sol.terms);
        j.push("residual", sol.residual);
    }
    j
}

pub fn run(s: &Scenario, sink: &Sink, report: &mut Json, checks: &mut Checks) -> Result<(), CliError> {
    let sys = s.system()?;
    let pair = s.pair()?;
    let (inc, out) = s.boundary(&sys)?;
    let (a, rep) = simulate(s, &sys, &pair, &inc, &out)?;
    let path = sink.path(".alb");
    write_matrix(&path, &a, &sink.scenario_hash, &sink.resolution)?;
    let norms = a.column_norms();
    let rows: Vec<Vec<f64>> = (0..a.n_in)
        .map(|j| {
            let p = &inc.nodes[j];
            vec![p.x[0], p.x[1], p.x[2], p.xi[0], p.xi[1], p.xi[2], a.input_norms[j], norms[j]]
        })
        .collect();
    sink.write_csv("columns", &["x1", "x2", "x3", "xi1", "xi2", "xi3", "input_norm", "column_norm"], &rows)?;
    report.push(
        "matrix",
        Json::obj()
            .field("file", path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default())
            .field("grid_hash", grid_hash(&a.grid_id))
            .field("n_out", a.n_out)
            .field("n_in", a.n_in)
            .field("sparse", matches!(a.entries, magrt::albedo::Entries::Sparse(_))),
    );
    report.push("solve", describe(&rep));
    report.push("norm", a.norm());
    // maximum principle: a unit incoming flux leaves with at most unit intensity
    if pair.k.is_zero() {
        let top = a.apply(&vec![1.0; a.n_in]).into_iter().fold(0.0, f64::max);
        checks.at_most("max_outgoing_for_unit_input", top, 1.0 + 1e-9);
    }
    Ok(())
}
