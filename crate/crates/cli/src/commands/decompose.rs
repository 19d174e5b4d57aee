use magrt::albedo::{build_albedo, decompose_kernel};
use magrt::transport::{AdmissiblePair, ScatteringKernel};

use super::albedo::{options, simulate};
use super::Checks;
use crate::artifact::Sink;
use crate::error::CliError;
use crate::json::Json;
use crate::scenario::{attenuation, kernel, Scenario};

/// Bound on the multiple-scattering part without scattering: pure interpolation round-off.
const INTERPOLATION_BUDGET: f64 = 1e-9;

pub fn run(s: &Scenario, sink: &Sink, report: &mut Json, checks: &mut Checks) -> Result<(), CliError> {
    let sys = s.system()?;
    let (inc, out) = s.boundary(&sys)?;
    let c = &s.coefficients;

    let ballistic = AdmissiblePair::new(attenuation(&c.a)?, ScatteringKernel::zero(), c.support);
    let (a0, _) = simulate(s, &sys, &ballistic, &inc, &out)?;
    let d0 = decompose_kernel(&a0, &sys, &ballistic, None, &inc, &out, s.ray())?;
    report.push("k_zero_a3_sup", d0.a3_sup);
    checks.at_most("k_zero_a3_sup", d0.a3_sup, INTERPOLATION_BUDGET);

    let scales = &s.run.decompose.kappa_scales;
    if scales.is_empty() || parse_is_zero(&c.k)? {
        return Ok(());
    }
    let grid = s.phase_grid(&sys)?;
    let mut runs = Vec::new();
    let mut rows = Vec::new();
    let mut sups = Vec::new();
    for &scale in scales {
        let pair = AdmissiblePair::new(attenuation(&c.a)?, kernel(&format!("{scale:e}*({})", c.k))?, c.support);
        let (a, rep) = build_albedo(&sys, &pair, Some(&grid), &inc, &out, &options(s))?;
        let d = decompose_kernel(&a, &sys, &pair, Some(&grid), &inc, &out, s.ray())?;
        let single = a.difference(&d.a1)?.norm();
        let mean = d.a3_column_norms.iter().sum::<f64>() / d.a3_column_norms.len().max(1) as f64;
        rows.push(vec![scale, d.a1.norm(), d.a2.norm(), d.a3_sup, mean]);
        runs.push(
            Json::obj()
                .field("scale", scale)
                .field("a1_norm", d.a1.norm())
                .field("a2_norm", d.a2.norm())
                .field("scattered_norm", single)
                .field("a3_sup", d.a3_sup)
                .field("a3_mean", mean)
                .field("solve", super::albedo::describe(&rep)),
        );
        sups.push((scale, d.a3_sup));
    }
    sink.write_csv("scales", &["scale", "a1_norm", "a2_norm", "a3_sup", "a3_mean"], &rows)?;
    report.push("runs", Json::Arr(runs));
    let mut factors = Vec::new();
    for w in sups.windows(2) {
        let (s0, n0) = w[0];
        let (s1, n1) = w[1];
        let factor = n0 / n1;
        let expected = (s0 / s1).powi(2);
        factors.push(factor);
        let pass = factor >= 0.75 * expected && factor <= 1.25 * expected;
        checks.record(&format!("a3_factor_{s0}_to_{s1}"), factor, expected, pass);
    }
    report.push("a3_factors", factors);
    Ok(())
}

fn parse_is_zero(src: &str) -> Result<bool, CliError> {
    Ok(crate::scenario::parse_expr(src)?.as_constant() == Some(0.0))
}
