//! Scenario files: TOML with `[system]`, `[coefficients]`, `[grids]`, `[run]` and `[output]`.

use std::path::{Path, PathBuf};

use magrt::expr::{Expr, Vars};
use magrt::geometry::{MagneticField, MagneticSystem, ScalarField};
use magrt::phase_space::{BoundaryGrid, Side, SphereBundleGrid};
use magrt::transport::{AdmissiblePair, Attenuation, RayOptions, ScatteringKernel, SolveMode};
use magrt::Vec3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub system: SystemSpec,
    #[serde(default)]
    pub coefficients: CoefficientSpec,
    #[serde(default)]
    pub grids: GridSpec,
    #[serde(default)]
    pub run: RunSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub dim: usize,
    /// Conformal factor `c(x)` of the metric `c(x) |dx|²`.
    #[serde(default = "one")]
    pub conformal: String,
    /// Planar field strength `b(x)`.
    #[serde(default)]
    pub field: Option<String>,
    /// Uniform field vector in space.
    #[serde(default)]
    pub field_vector: Option<[f64; 3]>,
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default)]
    pub max_time: Option<f64>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientSpec {
    /// Attenuation `a(x, ξ)`; `xi` is the Euclidean unit direction.
    #[serde(default = "zero")]
    pub a: String,
    /// Scattering kernel `k(x, η, ξ)` from incoming `eta` to outgoing `xi`.
    #[serde(default = "zero")]
    pub k: String,
    #[serde(default = "default_support")]
    pub support: f64,
}

impl Default for CoefficientSpec {
    fn default() -> Self {
        CoefficientSpec { a: zero(), k: zero(), support: default_support() }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default)]
    pub boundary_positions: Option<Vec<usize>>,
    #[serde(default)]
    pub boundary_directions: Option<Vec<usize>>,
    #[serde(default)]
    pub spatial: Option<Vec<usize>>,
    #[serde(default)]
    pub fiber: Option<Vec<usize>>,
    #[serde(default = "default_graze")]
    pub graze: f64,
    #[serde(default = "default_spacing")]
    pub ray_spacing: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            boundary_positions: None,
            boundary_directions: None,
            spatial: None,
            fiber: None,
            graze: default_graze(),
            ray_spacing: default_spacing(),
        }
    }
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    #[serde(default)]
    pub seed: u64,
    /// `neumann` or `direct`.
    #[serde(default)]
    pub mode: Option<String>,
    #[serde(default)]
    pub force: bool,
    #[serde(default)]
    pub trace: TraceSpec,
    #[serde(default)]
    pub santalo: SantaloSpec,
    #[serde(default)]
    pub forward: ForwardSpec,
    #[serde(default)]
    pub decompose: DecomposeSpec,
    #[serde(default)]
    pub invert: InvertSpec,
    #[serde(default)]
    pub gauge: GaugeSpec,
    #[serde(default)]
    pub stability: StabilitySpec,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSpec {
    /// Explicit starting points; empty means random interior starts.
    #[serde(default)]
    pub starts: Vec<[f64; 3]>,
    #[serde(default)]
    pub directions: Vec<[f64; 3]>,
    #[serde(default = "default_trace_count")]
    pub count: usize,
    /// Times used for the flow and exit-time cocycle checks.
    #[serde(default = "default_flow_times")]
    pub flow_times: [f64; 2],
    #[serde(default = "yes")]
    pub simplicity: bool,
}

impl Default for TraceSpec {
    fn default() -> Self {
        TraceSpec {
            starts: vec![],
            directions: vec![],
            count: default_trace_count(),
            flow_times: default_flow_times(),
            simplicity: true,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SantaloSpec {
    #[serde(default = "default_integrands")]
    pub integrands: Vec<String>,
    /// Known value of the first integrand's phase-space integral.
    #[serde(default)]
    pub exact: Option<f64>,
    #[serde(default)]
    pub max_discrepancy: Option<f64>,
}

impl Default for SantaloSpec {
    fn default() -> Self {
        SantaloSpec { integrands: default_integrands(), exact: None, max_discrepancy: None }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ForwardSpec {
    /// Incoming flux `u₊(x, ξ)`.
    #[serde(default = "one")]
    pub incoming: String,
    /// Random fields used for the operator bounds.
    #[serde(default = "default_lemma_samples")]
    pub lemma_samples: usize,
    /// Solve with both solvers and compare.
    #[serde(default)]
    pub compare: bool,
    /// Evaluate `(Id + K)(Id − 𝐓⁻¹T₁) − Id` on the solution.
    #[serde(default)]
    pub identity: bool,
    /// Power-iteration estimate of `‖T₁T₀⁻¹‖`.
    #[serde(default)]
    pub norm: bool,
}

impl Default for ForwardSpec {
    fn default() -> Self {
        ForwardSpec { incoming: one(), lemma_samples: default_lemma_samples(), compare: false, identity: false, norm: false }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DecomposeSpec {
    /// Multipliers applied to `k`; consecutive ratios of the multiple-scattering norm are reported.
    #[serde(default = "default_scales")]
    pub kappa_scales: Vec<f64>,
}

impl Default for DecomposeSpec {
    fn default() -> Self {
        DecomposeSpec { kappa_scales: default_scales() }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct InvertSpec {
    /// Albedo artifact to read instead of simulating the data.
    #[serde(default)]
    pub matrix: Option<PathBuf>,
    #[serde(default)]
    pub eps_list: Option<Vec<f64>>,
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub pixels: Option<usize>,
    /// Probe widths `(ε, ρ, δ)` from coarse to fine.
    #[serde(default = "default_schedule")]
    pub schedule: Vec<[f64; 3]>,
    /// Number of sampled scattering configurations (three dimensions only).
    #[serde(default)]
    pub configurations: usize,
    #[serde(default = "default_config_radius")]
    pub config_radius: f64,
    #[serde(default = "default_alignment")]
    pub max_alignment: f64,
    #[serde(default = "default_probe_spacing")]
    pub probe_spacing: f64,
    /// Coarse grids for collisions beyond the first in the probe model.
    #[serde(default = "default_bg_spatial")]
    pub background_spatial: Vec<usize>,
    #[serde(default = "default_bg_fiber")]
    pub background_fiber: Vec<usize>,
    #[serde(default = "default_bg_positions")]
    pub background_positions: Vec<usize>,
    #[serde(default = "default_bg_directions")]
    pub background_directions: Vec<usize>,
    #[serde(default = "default_bg_spacing")]
    pub background_spacing: f64,
    #[serde(default)]
    pub max_a_error: Option<f64>,
    #[serde(default)]
    pub max_ray_error: Option<f64>,
    #[serde(default)]
    pub max_k_error: Option<f64>,
}

impl Default for InvertSpec {
    fn default() -> Self {
        InvertSpec {
            matrix: None,
            eps_list: None,
            lambda: None,
            pixels: None,
            schedule: default_schedule(),
            configurations: 0,
            config_radius: default_config_radius(),
            max_alignment: default_alignment(),
            probe_spacing: default_probe_spacing(),
            background_spatial: default_bg_spatial(),
            background_fiber: default_bg_fiber(),
            background_positions: default_bg_positions(),
            background_directions: default_bg_directions(),
            background_spacing: default_bg_spacing(),
            max_a_error: None,
            max_ray_error: None,
            max_k_error: None,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GaugeSpec {
    /// Explicit `log w̃(x, ξ)` expressions, supported in `|x| < support`.
    #[serde(default)]
    pub gauges: Vec<String>,
    #[serde(default = "default_gauge_support")]
    pub support: f64,
    /// Additional random gauges drawn from the seed.
    #[serde(default)]
    pub random: usize,
    #[serde(default = "default_gauge_amplitude")]
    pub amplitude: f64,
    /// Multiple of the refinement change allowed for the gauge difference.
    #[serde(default = "default_tolerance_factor")]
    pub tolerance_factor: f64,
    #[serde(default)]
    pub distance: bool,
    #[serde(default = "default_sampling_spatial")]
    pub sampling_spatial: Vec<usize>,
    #[serde(default = "default_sampling_fiber")]
    pub sampling_fiber: Vec<usize>,
}

impl Default for GaugeSpec {
    fn default() -> Self {
        GaugeSpec {
            gauges: vec![],
            support: default_gauge_support(),
            random: 0,
            amplitude: default_gauge_amplitude(),
            tolerance_factor: default_tolerance_factor(),
            distance: false,
            sampling_spatial: default_sampling_spatial(),
            sampling_fiber: default_sampling_fiber(),
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct StabilitySpec {
    /// Perturbation directions: `ã_t = a + t·da`, `k̃_t = k + t·dk`.
    #[serde(default = "zero")]
    pub da: String,
    #[serde(default = "zero")]
    pub dk: String,
    #[serde(default = "default_t_values")]
    pub t_values: Vec<f64>,
    #[serde(default = "one_f")]
    pub sigma: f64,
    #[serde(default = "one_f")]
    pub rho: f64,
    #[serde(default = "default_slack")]
    pub slack: f64,
    #[serde(default = "default_pre_slack")]
    pub pre_slack: f64,
    #[serde(default = "default_pre2_rays")]
    pub pre2_rays: usize,
    #[serde(default = "default_f_samples")]
    pub f_samples: usize,
    #[serde(default = "default_sampling_spatial")]
    pub sampling_spatial: Vec<usize>,
    #[serde(default = "default_sampling_fiber")]
    pub sampling_fiber: Vec<usize>,
    /// `log w̃` for the gauged-pair run; empty skips it.
    #[serde(default)]
    pub gauge: Option<String>,
    #[serde(default = "default_gauge_support")]
    pub gauge_support: f64,
}

impl Default for StabilitySpec {
    fn default() -> Self {
        StabilitySpec {
            da: zero(),
            dk: zero(),
            t_values: default_t_values(),
            sigma: 1.0,
            rho: 1.0,
            slack: default_slack(),
            pre_slack: default_pre_slack(),
            pre2_rays: default_pre2_rays(),
            f_samples: default_f_samples(),
            sampling_spatial: default_sampling_spatial(),
            sampling_fiber: default_sampling_fiber(),
            gauge: None,
            gauge_support: default_gauge_support(),
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default = "default_output_dir")]
    pub dir: PathBuf,
    /// File stem; the command name when absent.
    #[serde(default)]
    pub prefix: Option<String>,
    #[serde(default = "yes")]
    pub csv: bool,
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec { dir: default_output_dir(), prefix: None, csv: true }
    }
}

fn one() -> String {
    "1".into()
}
fn zero() -> String {
    "0".into()
}
fn one_f() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}
fn default_step() -> f64 {
    5e-3
}
fn default_support() -> f64 {
    0.9
}
fn default_graze() -> f64 {
    1e-3
}
fn default_spacing() -> f64 {
    0.02
}
fn default_trace_count() -> usize {
    8
}
fn default_flow_times() -> [f64; 2] {
    [0.3137, 0.4211]
}
fn default_integrands() -> Vec<String> {
    vec!["1".into()]
}
fn default_lemma_samples() -> usize {
    5
}
fn default_scales() -> Vec<f64> {
    vec![1.0, 0.5]
}
fn default_schedule() -> Vec<[f64; 3]> {
    vec![[0.025, 0.2, 0.2], [0.0125, 0.1, 0.1], [0.00625, 0.05, 0.05]]
}
fn default_config_radius() -> f64 {
    0.5
}
fn default_alignment() -> f64 {
    0.9
}
fn default_probe_spacing() -> f64 {
    0.02
}
fn default_bg_spatial() -> Vec<usize> {
    vec![4, 4, 8]
}
fn default_bg_fiber() -> Vec<usize> {
    vec![4, 8]
}
fn default_bg_positions() -> Vec<usize> {
    vec![6, 12]
}
fn default_bg_directions() -> Vec<usize> {
    vec![3, 8]
}
fn default_bg_spacing() -> f64 {
    0.05
}
fn default_gauge_support() -> f64 {
    0.5
}
fn default_gauge_amplitude() -> f64 {
    0.08
}
fn default_tolerance_factor() -> f64 {
    3.0
}
fn default_sampling_spatial() -> Vec<usize> {
    vec![6, 12]
}
fn default_sampling_fiber() -> Vec<usize> {
    vec![12]
}
fn default_t_values() -> Vec<f64> {
    vec![0.02, 0.05, 0.1]
}
fn default_slack() -> f64 {
    0.1
}
fn default_pre_slack() -> f64 {
    0.05
}
fn default_pre2_rays() -> usize {
    32
}
fn default_f_samples() -> usize {
    8
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Set `path = value` in a TOML table, creating intermediate tables.
fn set_override(root: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override key `{key}` is malformed")));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(CliError::Config(format!("override `{key}`: `{p}` is not a table"))),
        };
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl Scenario {
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut root: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(format!("scenario: {e}")))?;
        for o in overrides {
            set_override(&mut root, o)?;
        }
        let s: Scenario = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(format!("scenario: {e}")))?;
        s.check()?;
        Ok(s)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, overrides)
    }

    fn check(&self) -> Result<(), CliError> {
        let d = self.system.dim;
        if d != 2 && d != 3 {
            return Err(CliError::Config(format!("system.dim must be 2 or 3, got {d}")));
        }
        if d == 2 && self.system.field_vector.is_some() {
            return Err(CliError::Config("system.field_vector is for three dimensions; use system.field".into()));
        }
        if d == 3 && self.system.field.is_some() {
            return Err(CliError::Config("system.field is planar; use system.field_vector in three dimensions".into()));
        }
        if !(self.coefficients.support > 0.0 && self.coefficients.support <= 1.0) {
            return Err(CliError::Config("coefficients.support must lie in (0, 1]".into()));
        }
        if !(self.system.step > 0.0) {
            return Err(CliError::Config("system.step must be positive".into()));
        }
        if let Some(m) = &self.run.mode {
            if m != "neumann" && m != "direct" {
                return Err(CliError::Config(format!("run.mode must be `neumann` or `direct`, got `{m}`")));
            }
        }
        // parse every expression once so errors surface before any work
        for e in [&self.system.conformal, &self.coefficients.a, &self.coefficients.k, &self.run.forward.incoming] {
            parse_expr(e)?;
        }
        if let Some(f) = &self.system.field {
            parse_expr(f)?;
        }
        for e in self.run.santalo.integrands.iter().chain(&self.run.gauge.gauges) {
            parse_expr(e)?;
        }
        for e in [&self.run.stability.da, &self.run.stability.dk] {
            parse_expr(e)?;
        }
        if let Some(g) = &self.run.stability.gauge {
            parse_expr(g)?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical form of everything that affects results.
    pub fn hash(&self) -> String {
        #[derive(Serialize)]
        struct Canonical<'a> {
            system: &'a SystemSpec,
            coefficients: &'a CoefficientSpec,
            grids: &'a GridSpec,
            run: &'a RunSpec,
        }
        let text = toml::to_string(&Canonical { system: &self.system, coefficients: &self.coefficients, grids: &self.grids, run: &self.run })
            .expect("scenario serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn system(&self) -> Result<MagneticSystem, CliError> {
        let s = &self.system;
        let mut sys = MagneticSystem::flat(s.dim).with_step(s.step);
        if let Some(t) = s.max_time {
            sys.max_time = t;
        }
        sys = sys.with_conformal(scalar_field(&s.conformal)?);
        if s.dim == 2 {
            if let Some(f) = &s.field {
                sys = sys.with_field(MagneticField::Planar(scalar_field(f)?));
            }
        } else if let Some(b) = s.field_vector {
            sys = sys.with_field(MagneticField::Uniform(Vec3::new(b[0], b[1], b[2])));
        }
        sys.validate()?;
        Ok(sys)
    }

    pub fn pair(&self) -> Result<AdmissiblePair, CliError> {
        let c = &self.coefficients;
        let pair = AdmissiblePair::new(attenuation(&c.a)?, kernel(&c.k)?, c.support);
        pair.validate(self.system.dim)?;
        Ok(pair)
    }

    pub fn mode(&self) -> SolveMode {
        match self.run.mode.as_deref() {
            Some("direct") => SolveMode::Direct,
            _ => SolveMode::Neumann,
        }
    }

    pub fn ray(&self) -> RayOptions {
        RayOptions { spacing: self.grids.ray_spacing, forward: true }
    }

    pub fn boundary_shape(&self) -> (Vec<usize>, Vec<usize>) {
        let g = &self.grids;
        let (p, d) = if self.system.dim == 2 { (vec![48], vec![32]) } else { (vec![12, 24], vec![8, 16]) };
        (g.boundary_positions.clone().unwrap_or(p), g.boundary_directions.clone().unwrap_or(d))
    }

    pub fn boundary(&self, sys: &MagneticSystem) -> Result<(BoundaryGrid, BoundaryGrid), CliError> {
        let (p, d) = self.boundary_shape();
        Ok((
            BoundaryGrid::new(sys, Side::Incoming, &p, &d, self.grids.graze)?,
            BoundaryGrid::new(sys, Side::Outgoing, &p, &d, self.grids.graze)?,
        ))
    }

    pub fn phase_shape(&self) -> (Vec<usize>, Vec<usize>) {
        let g = &self.grids;
        let (s, f) = if self.system.dim == 2 { (vec![40, 40], vec![64]) } else { (vec![12, 12, 12], vec![8, 16]) };
        (g.spatial.clone().unwrap_or(s), g.fiber.clone().unwrap_or(f))
    }

    pub fn phase_grid(&self, sys: &MagneticSystem) -> Result<SphereBundleGrid, CliError> {
        let (s, f) = self.phase_shape();
        Ok(SphereBundleGrid::new(sys, &s, &f)?)
    }

    /// Resolution summary embedded in every artifact.
    pub fn resolution(&self) -> String {
        let (p, d) = self.boundary_shape();
        let (s, f) = self.phase_shape();
        format!(
            "n{} boundary p{:?} d{:?} phase s{:?} f{:?} step {:e} spacing {:e}",
            self.system.dim, p, d, s, f, self.system.step, self.grids.ray_spacing
        )
    }
}

pub fn parse_expr(src: &str) -> Result<Expr, CliError> {
    Expr::parse(src).map_err(|e| CliError::Config(format!("expression `{src}`: {e}")))
}

fn vars(x: &Vec3, xi: Option<&Vec3>, eta: Option<&Vec3>) -> Vars {
    let arr = |v: &Vec3| [v[0], v[1], v[2]];
    Vars { x: arr(x), xi: xi.map(arr).unwrap_or_default(), eta: eta.map(arr).unwrap_or_default() }
}

pub fn scalar_field(src: &str) -> Result<ScalarField, CliError> {
    let e = parse_expr(src)?;
    if e.uses_xi() || e.uses_eta() {
        return Err(CliError::Config(format!("`{src}` may only depend on x")));
    }
    Ok(match e.as_constant() {
        Some(c) => ScalarField::constant(c),
        None => ScalarField::from_fn(move |x| e.eval(&vars(x, None, None))),
    })
}

pub fn attenuation(src: &str) -> Result<Attenuation, CliError> {
    let e = parse_expr(src)?;
    if e.uses_eta() {
        return Err(CliError::Config(format!("attenuation `{src}` may not use eta")));
    }
    Ok(match e.as_constant() {
        Some(c) if c == 0.0 => Attenuation::zero(),
        _ if e.uses_xi() => Attenuation::from_fn(move |x, xi| e.eval(&vars(x, Some(xi), None))),
        _ => Attenuation::isotropic(move |x| e.eval(&vars(x, None, None))),
    })
}

pub fn kernel(src: &str) -> Result<ScatteringKernel, CliError> {
    let e = parse_expr(src)?;
    Ok(match e.as_constant() {
        Some(c) if c == 0.0 => ScatteringKernel::zero(),
        _ if e.uses_xi() || e.uses_eta() => {
            ScatteringKernel::from_fn(move |x, eta, xi| e.eval(&vars(x, Some(xi), Some(eta))))
        }
        _ => ScatteringKernel::isotropic(move |x| e.eval(&vars(x, None, None))),
    })
}

/// `log w(x, ξ)` from an expression in `x` and `xi`.
pub fn log_gauge(src: &str) -> Result<impl Fn(&Vec3, &Vec3) -> f64 + Send + Sync + 'static, CliError> {
    let e = parse_expr(src)?;
    if e.uses_eta() {
        return Err(CliError::Config(format!("gauge `{src}` may not use eta")));
    }
    Ok(move |x: &Vec3, xi: &Vec3| e.eval(&vars(x, Some(xi), None)))
}
