//! One module per subcommand. Each returns a report and the list of failed checks.

use std::path::Path;

use crate::artifact::Sink;
use crate::error::CliError;
use crate::json::Json;
use crate::scenario::Scenario;

mod albedo;
mod decompose;
mod forward;
mod gauge;
mod invert;
mod santalo;
mod stability;
mod trace;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Trace,
    Santalo,
    Forward,
    Albedo,
    Decompose,
    Invert,
    Gauge,
    Stability,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Trace => "trace",
            Command::Santalo => "santalo",
            Command::Forward => "forward",
            Command::Albedo => "albedo",
            Command::Decompose => "decompose",
            Command::Invert => "invert",
            Command::Gauge => "gauge",
            Command::Stability => "stability",
        }
    }
}

/// Named inequality checks collected while a command runs.
#[derive(Default)]
pub struct Checks {
    items: Vec<Json>,
    failed: Vec<String>,
}

impl Checks {
    /// Record `value ≤ bound`.
    pub fn at_most(&mut self, name: &str, value: f64, bound: f64) -> bool {
        let pass = value <= bound;
        self.record(name, value, bound, pass);
        pass
    }

    pub fn record(&mut self, name: &str, value: f64, bound: f64, pass: bool) {
        self.items.push(Json::obj().field("name", name).field("value", value).field("bound", bound).field("pass", pass));
        if !pass {
            self.failed.push(format!("{name}: {value:e} against {bound:e}"));
        }
    }

    pub fn flag(&mut self, name: &str, pass: bool) {
        self.items.push(Json::obj().field("name", name).field("pass", pass));
        if !pass {
            self.failed.push(name.to_string());
        }
    }

    pub fn finish(self, report: &mut Json) -> Vec<String> {
        report.push("pass", self.failed.is_empty());
        report.push("checks", Json::Arr(self.items));
        self.failed
    }
}

pub struct Outcome {
    pub report: Json,
    pub failures: Vec<String>,
}

pub fn run(cmd: Command, s: &Scenario, output_dir: Option<&Path>) -> Result<(Outcome, Sink), CliError> {
    let sink = Sink::new(s, cmd.name(), output_dir)?;
    let mut report = sink.report(cmd.name());
    let mut checks = Checks::default();
    match cmd {
        Command::Trace => trace::run(s, &sink, &mut report, &mut checks)?,
        Command::Santalo => santalo::run(s, &sink, &mut report, &mut checks)?,
        Command::Forward => forward::run(s, &sink, &mut report, &mut checks)?,
        Command::Albedo => albedo::run(s, &sink, &mut report, &mut checks)?,
        Command::Decompose => decompose::run(s, &sink, &mut report, &mut checks)?,
        Command::Invert => invert::run(s, &sink, &mut report, &mut checks)?,
        Command::Gauge => gauge::run(s, &sink, &mut report, &mut checks)?,
        Command::Stability => stability::run(s, &sink, &mut report, &mut checks)?,
    }
    let failures = checks.finish(&mut report);
    Ok((Outcome { report, failures }, sink))
}

pub(crate) fn vec3(v: &magrt::Vec3) -> Json {
    Json::from(vec![v[0], v[1], v[2]])
}
