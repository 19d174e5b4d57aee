use magrt::albedo::{albedo_opnorm_l1, AlbedoOperator};
use magrt::gauge::{apply_gauge, GaugeFunction, NormSampling};
use magrt::phase_space::{BoundaryGrid, SphereBundleGrid};
use magrt::stability::{check_pre1, check_pre2, spread_nodes, stability_experiment, ExperimentOptions, StabilityRun};
use magrt::transport::AdmissiblePair;
use magrt::MagneticSystem;

use super::albedo::simulate;
use super::Checks;
use crate::artifact::Sink;
use crate::error::CliError;
use crate::json::Json;
use crate::scenario::{attenuation, kernel, log_gauge, parse_expr, Scenario};

/// A gauged copy must move the coefficients by this multiple of its albedo change.
const GAUGED_SIGNATURE: f64 = 10.0;

fn describe(run: &StabilityRun) -> Json {
    let g = &run.geometry;
    let c = &run.constants;
    Json::obj()
        .field("eps", run.eps)
        .field(
            "geometry",
            Json::obj().field("c0", g.c0).field("diam_mu", g.diam_mu).field("omega", g.omega).field("vol_boundary", g.vol_boundary),
        )
        .field(
            "constants",
            Json::obj()
                .field("sigma", c.sigma)
                .field("rho", c.rho)
                .field("c1", c.c1)
                .field("c", c.c)
                .field("c_a", c.c_a)
                .field("c_k", c.c_k),
        )
        .field("a_measured", run.a_measured)
        .field("a_bound", run.a_bound)
        .field("a_holds", run.a_holds)
        .field("k_measured", run.k_measured)
        .field("k_bound", run.k_bound)
        .field("k_holds", run.k_holds)
        .field("raw_a", run.raw_a)
        .field("raw_k", run.raw_k)
        .field("logw_max", run.logw_max)
        .field("logw_bound", run.logw_bound)
        .field("logw_holds", run.logw_holds)
        .field("f_min", run.f_min)
        .field("f_bound", run.f_bound)
        .field("f_holds", run.f_holds)
}

fn final_checks(checks: &mut Checks, label: &str, run: &StabilityRun) {
    checks.record(&format!("{label}.a_distance"), run.a_measured, run.a_bound, run.a_holds);
    checks.record(&format!("{label}.k_distance"), run.k_measured, run.k_bound, run.k_holds);
    checks.record(&format!("{label}.logw"), run.logw_max, run.logw_bound, run.logw_holds);
    checks.record(&format!("{label}.f_lower_bound"), run.f_min, run.f_bound, run.f_holds);
}

struct Context<'a> {
    s: &'a Scenario,
    sys: &'a MagneticSystem,
    pair: &'a AdmissiblePair,
    a0: &'a AlbedoOperator,
    inc: &'a BoundaryGrid,
    out: &'a BoundaryGrid,
    grid: &'a SphereBundleGrid,
    sampling: &'a NormSampling,
    opts: &'a ExperimentOptions,
}

impl Context<'_> {
    fn experiment(&self, q: &AdmissiblePair) -> Result<(AlbedoOperator, StabilityRun), CliError> {
        let (aq, _) = simulate(self.s, self.sys, q, self.inc, self.out)?;
        let run = stability_experiment(self.sys, self.pair, q, self.a0, &aq, self.inc, self.out, self.sampling, self.opts)?;
        Ok((aq, run))
    }
}

pub fn run(s: &Scenario, sink: &Sink, report: &mut Json, checks: &mut Checks) -> Result<(), CliError> {
    let sys = s.system()?;
    let pair = s.pair()?;
    let (inc, out) = s.boundary(&sys)?;
    let grid = s.phase_grid(&sys)?;
    let spec = &s.run.stability;
    let sampling = NormSampling::new(&sys, &spec.sampling_spatial, &spec.sampling_fiber)?;
    let spacing = s.grids.ray_spacing;
    let opts = ExperimentOptions {
        sigma: spec.sigma,
        rho: spec.rho,
        spacing,
        slack: spec.slack,
        f_samples: spec.f_samples,
        ..Default::default()
    };
    let (a0, _) = simulate(s, &sys, &pair, &inc, &out)?;
    let ctx = Context { s, sys: &sys, pair: &pair, a0: &a0, inc: &inc, out: &out, grid: &grid, sampling: &sampling, opts: &opts };
    let nodes = spread_nodes(inc.len(), spec.pre2_rays);

    let c = &s.coefficients;
    let perturbs_a = parse_expr(&spec.da)?.as_constant() != Some(0.0);
    let perturbs_k = parse_expr(&spec.dk)?.as_constant() != Some(0.0);
    let mut sweep = Vec::new();
    let mut rows = Vec::new();
    let mut points = Vec::new();
    for (i, &t) in spec.t_values.iter().enumerate() {
        let a_src = if perturbs_a { format!("({})+{t:e}*({})", c.a, spec.da) } else { c.a.clone() };
        let k_src = if perturbs_k { format!("({})+{t:e}*({})", c.k, spec.dk) } else { c.k.clone() };
        let q = AdmissiblePair::new(attenuation(&a_src)?, kernel(&k_src)?, c.support);
        q.validate(sys.dim)?;
        let (aq, run) = ctx.experiment(&q)?;
        let eps = albedo_opnorm_l1(&a0, &aq)?;
        let pre1 = check_pre1(eps, &sys, &pair, &q, &inc, spacing, spec.pre_slack)?;
        let pre2 = check_pre2(eps, &sys, &pair, &q, &inc, &nodes, &ctx.grid.fiber, spacing, spec.pre_slack)?;
        let label = format!("t[{i}]");
        checks.record(&format!("{label}.pre1"), pre1.max_lhs, eps * (1.0 + spec.pre_slack), pre1.holds);
        checks.record(&format!("{label}.pre2_worst_ratio"), pre2.worst_ratio, 1.0 + spec.pre_slack, pre2.holds);
        final_checks(checks, &label, &run);
        rows.push(vec![t, eps, run.a_measured, run.a_bound, run.k_measured, run.k_bound, pre1.max_lhs, pre2.worst_ratio]);
        points.push((run.eps, run.a_measured.max(run.k_measured)));
        let rays: Vec<Json> = pre2
            .rays
            .iter()
            .map(|r| {
                Json::obj()
                    .field("node", r.node)
                    .field("lhs", r.lhs)
                    .field("rhs", r.rhs)
                    .field("lhs_swapped", r.lhs_swapped)
                    .field("rhs_swapped", r.rhs_swapped)
                    .field("holds", r.holds)
            })
            .collect();
        sweep.push(
            describe(&run)
                .field("t", t)
                .field("pre1", Json::obj().field("max_lhs", pre1.max_lhs).field("max_violation", pre1.max_violation).field("holds", pre1.holds))
                .field("pre2", Json::obj().field("worst_ratio", pre2.worst_ratio).field("holds", pre2.holds).field("rays", Json::Arr(rays))),
        );
    }
    sink.write_csv("sweep", &["t", "eps", "a_measured", "a_bound", "k_measured", "k_bound", "pre1_max_lhs", "pre2_worst_ratio"], &rows)?;
    report.push("sweep", Json::Arr(sweep));
    if points.len() >= 2 {
        let (e0, m0) = points[0];
        let (e1, m1) = points[points.len() - 1];
        if e0 > 0.0 && e1 > e0 && m0 > 0.0 && m1 > 0.0 {
            report.push("loglog_slope", (m1 / m0).ln() / (e1 / e0).ln());
        }
    }

    if let Some(src) = &spec.gauge {
        let w = GaugeFunction::from_log(spec.gauge_support, log_gauge(src)?).check(&sys, &inc, &out)?;
        if !w.boundary_all_one {
            return Err(CliError::Config(format!("gauge `{src}` is not 1 on the boundary")));
        }
        let q = apply_gauge(&sys, &pair, &w);
        let (_, run) = ctx.experiment(&q)?;
        final_checks(checks, "gauged", &run);
        let signature = run.raw_a.max(run.raw_k) / run.eps.max(f64::MIN_POSITIVE);
        checks.record("gauged.raw_distance_over_eps", signature, GAUGED_SIGNATURE, signature >= GAUGED_SIGNATURE);
        report.push("gauged", describe(&run).field("log_w", src.as_str()));
    }
    Ok(())
}
