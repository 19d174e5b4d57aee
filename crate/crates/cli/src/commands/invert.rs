use magrt::albedo::{ballistic_albedo, grid_id, AlbedoProbe, ProbeQuadrature};
use magrt::inversion::{reconstruct_pair, sample_configurations, CgOptions, PipelineConfig};
use magrt::phase_space::{BoundaryGrid, Side, SphereBundleGrid};
use magrt::transport::RayOptions;

use super::albedo::{describe, simulate};
use super::{vec3, Checks};
use crate::artifact::{grid_hash, read_matrix, Sink};
use crate::error::CliError;
use crate::json::Json;
use crate::scenario::Scenario;

const EPS_LIST: [f64; 3] = [0.8, 0.4, 0.2];

pub fn run(s: &Scenario, sink: &Sink, report: &mut Json, checks: &mut Checks) -> Result<(), CliError> {
    let sys = s.system()?;
    let pair = s.pair()?;
    let (inc, out) = s.boundary(&sys)?;
    let spec = &s.run.invert;

    let a = match &spec.matrix {
        Some(path) => {
            let (header, a) = read_matrix(path)?;
            let expected = grid_hash(&grid_id(&inc, &out));
            if header.grid_hash != expected {
                return Err(CliError::Config(format!(
                    "matrix {} was built on grid {} but the scenario grid is {}",
                    path.display(),
                    header.grid_hash,
                    expected
                )));
            }
            report.push(
                "data",
                Json::obj()
                    .field("source", "matrix")
                    .field("matrix_scenario_hash", header.scenario_hash)
                    .field("matrix_resolution", header.resolution),
            );
            a
        }
        None if sys.dim == 3 && !pair.k.is_zero() => {
            // dense scattering albedos are out of reach in three dimensions; the ray
            // stage reads the ballistic part and scattering is probed separately
            let a = ballistic_albedo(&sys, &pair.a, &inc, &out, s.ray())?;
            report.push("data", Json::obj().field("source", "ballistic"));
            a
        }
        None => {
            let (a, rep) = simulate(s, &sys, &pair, &inc, &out)?;
            report.push("data", Json::obj().field("source", "simulated").field("solve", describe(&rep)));
            a
        }
    };

    let configs = if sys.dim == 3 && spec.configurations > 0 {
        sample_configurations(&sys, spec.configurations, s.run.seed, spec.config_radius, spec.max_alignment)?
    } else {
        vec![]
    };
    let cfg = PipelineConfig {
        eps_list: spec.eps_list.clone().unwrap_or_else(|| EPS_LIST.to_vec()),
        lambda: spec.lambda.unwrap_or(1e-3),
        pixels: spec.pixels.unwrap_or(if sys.dim == 2 { 41 } else { 21 }),
        ray: s.ray(),
        cg: CgOptions::default(),
        schedule: spec.schedule.iter().map(|w| (w[0], w[1], w[2])).collect(),
        configs,
    };

    let rec = if cfg.configs.is_empty() {
        reconstruct_pair(&a, None, &sys, &inc, &out, &cfg, Some(&pair))?
    } else {
        let bg_grid = SphereBundleGrid::new(&sys, &spec.background_spatial, &spec.background_fiber)?;
        let bg_inc = BoundaryGrid::new(&sys, Side::Incoming, &spec.background_positions, &spec.background_directions, s.grids.graze)?;
        let bg_out = BoundaryGrid::new(&sys, Side::Outgoing, &spec.background_positions, &spec.background_directions, s.grids.graze)?;
        let probe = AlbedoProbe::new(&sys, &pair, spec.probe_spacing, ProbeQuadrature::default())?.with_background(
            &bg_grid,
            &bg_inc,
            &bg_out,
            RayOptions { spacing: spec.background_spacing, forward: true },
        )?;
        reconstruct_pair(&a, Some(&probe), &sys, &inc, &out, &cfg, Some(&pair))?
    };

    let d = &rec.rays;
    let rows: Vec<Vec<f64>> = (0..d.nodes.len())
        .map(|i| {
            let p = &d.nodes[i];
            let f = if d.flagged[i] { 1.0 } else { 0.0 };
            vec![p.x[0], p.x[1], p.x[2], p.xi[0], p.xi[1], p.xi[2], d.values[i], d.e_estimates[i], f]
        })
        .collect();
    sink.write_csv("rays", &["x1", "x2", "x3", "xi1", "xi2", "xi3", "ray_transform", "e", "flagged"], &rows)?;
    let f = &rec.field;
    let rows: Vec<Vec<f64>> = f.grid.nodes.iter().zip(&f.coeffs).map(|(x, c)| vec![x[0], x[1], x[2], *c]).collect();
    sink.write_csv("attenuation", &["x1", "x2", "x3", "a"], &rows)?;

    report.push(
        "rays",
        Json::obj().field("nodes", d.nodes.len()).field("usable", d.usable()).field("eps_list", d.eps_list.clone()),
    );
    report.push(
        "field",
        Json::obj()
            .field("pixels", cfg.pixels)
            .field("lambda", f.lambda)
            .field("rows", f.rows)
            .field("iterations", f.iterations)
            .field("data_residual", f.data_residual)
            .field("underdetermined", f.underdetermined),
    );
    let samples: Vec<Json> = rec
        .samples
        .iter()
        .map(|smp| {
            let c = sys.c(&smp.config.y).sqrt();
            let truth = pair.k.eval(&smp.config.y, &(smp.config.eta_in * c), &(smp.config.eta_out * c));
            Json::obj()
                .field("y", vec3(&smp.config.y))
                .field("eta_in", vec3(&smp.config.eta_in))
                .field("eta_out", vec3(&smp.config.eta_out))
                .field("alignment", smp.alignment)
                .field("responses", smp.responses.clone())
                .field("estimate", smp.estimate)
                .field("truth", truth)
        })
        .collect();
    report.push("scattering", Json::Arr(samples));

    if let Some(e) = &rec.errors {
        report.push(
            "errors",
            Json::obj()
                .field("a_relative_l2", e.a_relative_l2)
                .field("ray_max_relative", e.ray_max_relative)
                .field("ray_max_absolute", e.ray_max_absolute)
                .field("k_max_relative", e.k_max_relative),
        );
        if let Some(tol) = spec.max_a_error {
            checks.at_most("a_relative_l2", e.a_relative_l2, tol);
        }
        if let Some(tol) = spec.max_ray_error {
            checks.at_most("ray_max_relative", e.ray_max_relative, tol);
            checks.at_most("ray_max_absolute", e.ray_max_absolute, tol);
        }
        if let Some(tol) = spec.max_k_error {
            match e.k_max_relative {
                Some(k) => checks.at_most("k_max_relative", k, tol),
                None => {
                    checks.flag("k_max_relative_available", false);
                    false
                }
            };
        }
    }
    Ok(())
}
