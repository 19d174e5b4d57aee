use magrt::albedo::{albedo_opnorm_l1, build_albedo, AlbedoOperator, AlbedoOptions};
use magrt::gauge::{apply_gauge, gauge_distance, GaugeFunction, NormSampling};
use magrt::phase_space::SphereBundleGrid;
use magrt::transport::{AdmissiblePair, RayOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::albedo::options;
use super::Checks;
use crate::artifact::Sink;
use crate::error::CliError;
use crate::json::Json;
use crate::scenario::{log_gauge, Scenario};

/// `log w` with compact support inside `support`: a bump with a linear angular tilt.
fn random_gauge<R: Rng>(rng: &mut R, dim: usize, support: f64, amp: f64) -> String {
    let mut c = [0.0; 3];
    let mut v = [0.0; 3];
    for i in 0..dim {
        c[i] = rng.gen_range(-1.0..1.0);
        v[i] = rng.gen_range(-1.0..1.0);
    }
    let cn = c.iter().map(|t| t * t).sum::<f64>().sqrt().max(1e-12);
    let r = rng.gen_range(0.0..0.4) * support;
    let c: Vec<f64> = c.iter().map(|t| t / cn * r).collect();
    let vn = v.iter().map(|t| t * t).sum::<f64>().sqrt().max(1e-12);
    let radius = support - r;
    let height = rng.gen_range(-amp..amp);
    let tilt = rng.gen_range(0.0..0.5);
    let dist = (0..dim).map(|i| format!("(x{}-({:e}))^2", i + 1, c[i])).collect::<Vec<_>>().join("+");
    let dir = (0..dim).map(|i| format!("({:e})*xi{}", v[i] / vn, i + 1)).collect::<Vec<_>>().join("+");
    format!("{height:e}*bump(sqrt({dist})/{radius:e})*(1+{tilt:e}*({dir}))")
}

fn refined(s: &Scenario, sys: &magrt::MagneticSystem) -> Result<SphereBundleGrid, CliError> {
    let (sp, fb) = s.phase_shape();
    let sp: Vec<usize> = sp.iter().map(|n| 2 * n).collect();
    let fb: Vec<usize> = fb.iter().map(|n| 2 * n).collect();
    Ok(SphereBundleGrid::new(sys, &sp, &fb)?)
}

pub fn run(s: &Scenario, sink: &Sink, report: &mut Json, checks: &mut Checks) -> Result<(), CliError> {
    let sys = s.system()?;
    let pair = s.pair()?;
    let (inc, out) = s.boundary(&sys)?;
    let spec = &s.run.gauge;
    if !(spec.support > 0.0 && spec.support <= s.coefficients.support) {
        return Err(CliError::Config("run.gauge.support must lie in (0, coefficients.support]".into()));
    }

    let mut sources = spec.gauges.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(s.run.seed);
    for _ in 0..spec.random {
        sources.push(random_gauge(&mut rng, sys.dim, spec.support, spec.amplitude));
    }
    if sources.is_empty() {
        return Err(CliError::Config("no gauges: set run.gauge.gauges or run.gauge.random".into()));
    }

    let coarse = s.phase_grid(&sys)?;
    let fine = refined(s, &sys)?;
    let coarse_opts = options(s);
    let fine_opts = AlbedoOptions { ray: RayOptions { spacing: 0.5 * s.grids.ray_spacing, forward: true }, ..options(s) };
    let build = |p: &AdmissiblePair, g: &SphereBundleGrid, fine: bool| -> Result<AlbedoOperator, CliError> {
        let grid = if p.k.is_zero() { None } else { Some(g) };
        let o = if fine { &fine_opts } else { &coarse_opts };
        Ok(build_albedo(&sys, p, grid, &inc, &out, o)?.0)
    };

    let a_coarse = build(&pair, &coarse, false)?;
    let a_fine = build(&pair, &fine, true)?;
    let tolerance = albedo_opnorm_l1(&a_coarse, &a_fine)?;
    report.push("solver_tolerance", tolerance);
    report.push("tolerance_factor", spec.tolerance_factor);

    let sampling = if spec.distance { Some(NormSampling::new(&sys, &spec.sampling_spatial, &spec.sampling_fiber)?) } else { None };
    let mut items = Vec::new();
    let mut rows = Vec::new();
    for (g, src) in sources.iter().enumerate() {
        let w = GaugeFunction::from_log(spec.support, log_gauge(src)?).check(&sys, &inc, &out)?;
        if !w.boundary_all_one {
            return Err(CliError::Config(format!("gauge `{src}` is not 1 on the boundary")));
        }
        let (lo, hi) = w.bounds(&coarse)?;
        let gauged = apply_gauge(&sys, &pair, &w);
        gauged.validate(sys.dim).map_err(|e| CliError::Config(format!("gauge `{src}` gives an invalid pair: {e}")))?;
        let d_coarse = albedo_opnorm_l1(&a_coarse, &build(&gauged, &coarse, false)?)?;
        let d_fine = albedo_opnorm_l1(&a_fine, &build(&gauged, &fine, true)?)?;
        let mut item = Json::obj()
            .field("log_w", src.as_str())
            .field("w_min", lo)
            .field("w_max", hi)
            .field("difference", d_coarse)
            .field("difference_refined", d_fine);
        checks.at_most(&format!("gauge[{g}].difference"), d_coarse, spec.tolerance_factor * tolerance);
        // the residual difference is discretization error, so it must not grow under refinement
        checks.at_most(&format!("gauge[{g}].refined_difference"), d_fine, d_coarse + 0.1 * tolerance);
        if let Some(smp) = &sampling {
            let d = gauge_distance(&sys, &pair, &gauged, smp, s.grids.ray_spacing)?;
            item.push("raw_a_distance", d.raw_a_distance);
            item.push("raw_k_distance", d.raw_k_distance);
            item.push("delta_upper", d.delta_upper);
        }
        rows.push(vec![g as f64, lo, hi, d_coarse, d_fine]);
        items.push(item);
    }
    sink.write_csv("differences", &["gauge", "w_min", "w_max", "difference", "difference_refined"], &rows)?;
    report.push("gauges", Json::Arr(items));
    Ok(())
}
