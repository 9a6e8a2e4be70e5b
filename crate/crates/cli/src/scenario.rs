//! Scenario files.
//!
//! Scenarios are TOML. Relative paths are resolved against the directory of
//! the scenario file. Loading is exhaustive: every problem that can be found
//! without running is collected before anything is reported.

use std::collections::HashMap;
use std::fmt;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use gridloop::consumers::{NodeMeter, OverheadModel, PowerModel};
use gridloop::generation::{
    PowerCurve, ProducerKind, SolarPanelSpec, SolarProducer, TraceProducer, WindProducer, WindTurbineSpec,
    DEFAULT_SHEAR_EXPONENT,
};
use gridloop::signals::{load_trace, Column, ForecastSet, Interpolation, Trace, TraceOptions, Unit};
use gridloop::sim::{CarbonSignal, IntensityKind};
use gridloop::storage::{Battery, BatterySpec};
use gridloop::{ExecutionMode, Simulation, Subsystem, Timestamp};
use serde::Deserialize;

pub const DEFAULT_LISTEN: &str = "127.0.0.1:8080";

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub start: Timestamp,
    pub step_size_s: u32,
    pub duration_s: u64,
    #[serde(default)]
    pub mode: Option<ExecutionMode>,
    #[serde(default)]
    pub carbon_intensity: Option<CarbonConfig>,
    #[serde(default)]
    pub producers: Vec<ProducerConfig>,
    #[serde(default)]
    pub consumers: Vec<ConsumerConfig>,
    #[serde(default)]
    pub overhead: Option<OverheadConfig>,
    #[serde(default)]
    pub battery: Option<BatteryConfig>,
    #[serde(default)]
    pub api: ApiConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

/// A constant, or a CSV file with column and sampling options.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum TraceSource {
    Constant(f64),
    File(TraceFile),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceFile {
    pub path: PathBuf,
    #[serde(default)]
    pub time_column: Option<Column>,
    #[serde(default)]
    pub value_column: Option<Column>,
    #[serde(default)]
    pub interpolation: Interpolation,
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default)]
    pub repeat: bool,
}

fn one() -> f64 {
    1.0
}

/// Inline `[[x, y], ...]` points or a two-column CSV file.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum TableSource {
    Points(Vec<(f64, f64)>),
    File(PathBuf),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CarbonConfig {
    #[serde(default = "default_ci_id")]
    pub id: String,
    pub trace: TraceSource,
    #[serde(default)]
    pub forecast_dir: Option<PathBuf>,
    #[serde(default)]
    pub kind: IntensityKind,
}

fn default_ci_id() -> String {
    "carbon-intensity".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProducerConfig {
    Solar {
        id: String,
        irradiance: TraceSource,
        area_m2: f64,
        efficiency: f64,
        #[serde(default)]
        order_hint: i32,
    },
    Wind {
        id: String,
        wind_speed: TraceSource,
        power_curve: TableSource,
        cut_in_mps: f64,
        cut_out_mps: f64,
        hub_height_m: f64,
        reference_height_m: f64,
        #[serde(default)]
        shear_exponent: Option<f64>,
        #[serde(default)]
        order_hint: i32,
    },
    Trace {
        id: String,
        power: TraceSource,
        #[serde(default)]
        kind: ProducerKind,
        #[serde(default)]
        order_hint: i32,
    },
}

impl ProducerConfig {
    fn id(&self) -> &str {
        match self {
            ProducerConfig::Solar { id, .. } | ProducerConfig::Wind { id, .. } | ProducerConfig::Trace { id, .. } => id,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "meter", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConsumerConfig {
    Trace {
        node_id: String,
        power: TraceSource,
        #[serde(default)]
        power_cap_w: Option<f64>,
        #[serde(default)]
        order_hint: i32,
    },
    Model {
        node_id: String,
        power_model: TableSource,
        utilization: TraceSource,
        #[serde(default)]
        power_cap_w: Option<f64>,
        #[serde(default)]
        order_hint: i32,
    },
    Push {
        node_id: String,
        staleness_timeout_s: f64,
        #[serde(default)]
        power_cap_w: Option<f64>,
        #[serde(default)]
        order_hint: i32,
    },
}

impl ConsumerConfig {
    fn node_id(&self) -> &str {
        match self {
            ConsumerConfig::Trace { node_id, .. }
            | ConsumerConfig::Model { node_id, .. }
            | ConsumerConfig::Push { node_id, .. } => node_id,
        }
    }

    fn power_cap_w(&self) -> Option<f64> {
        match self {
            ConsumerConfig::Trace { power_cap_w, .. }
            | ConsumerConfig::Model { power_cap_w, .. }
            | ConsumerConfig::Push { power_cap_w, .. } => *power_cap_w,
        }
    }

    fn order_hint(&self) -> i32 {
        match self {
            ConsumerConfig::Trace { order_hint, .. }
            | ConsumerConfig::Model { order_hint, .. }
            | ConsumerConfig::Push { order_hint, .. } => *order_hint,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverheadConfig {
    #[serde(default)]
    pub pue: Option<f64>,
    #[serde(default)]
    pub table: Option<TableSource>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatteryConfig {
    #[serde(default = "default_battery_id")]
    pub id: String,
    pub capacity_kwh: f64,
    pub c_rate: f64,
    pub charge_efficiency: f64,
    pub initial_soc_kwh: f64,
    #[serde(default)]
    pub min_soc_kwh: Option<f64>,
    #[serde(default)]
    pub grid_charge_w: Option<f64>,
}

fn default_battery_id() -> String {
    "battery".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApiConfig {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_listen")]
    pub listen: String,
}

impl Default for ApiConfig {
    fn default() -> Self {
        ApiConfig { enabled: false, listen: default_listen() }
    }
}

fn default_listen() -> String {
    DEFAULT_LISTEN.into()
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub csv: Option<PathBuf>,
    /// Also write the summary block to this file.
    #[serde(default)]
    pub summary: Option<PathBuf>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub mode: Option<ExecutionMode>,
    pub until_s: Option<u64>,
    pub listen: Option<String>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Issue {
    pub field: String,
    pub reason: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.field.is_empty() {
            f.write_str(&self.reason)
        } else {
            write!(f, "{}: {}", self.field, self.reason)
        }
    }
}

/// Every problem found while loading a scenario.
#[derive(Debug, Clone)]
pub struct ScenarioError {
    pub file: PathBuf,
    pub issues: Vec<Issue>,
}

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, issue) in self.issues.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{}: {issue}", self.file.display())?;
        }
        Ok(())
    }
}

impl std::error::Error for ScenarioError {}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubsystemRow {
    pub id: String,
    pub class: &'static str,
    pub detail: String,
}

/// A validated scenario, ready to run.
pub struct Prepared {
    pub sim: Simulation,
    pub mode: ExecutionMode,
    pub duration_s: u64,
    pub listen: Option<SocketAddr>,
    pub csv: Option<PathBuf>,
    pub summary: Option<PathBuf>,
    pub subsystems: Vec<SubsystemRow>,
    pub warnings: Vec<String>,
}

struct Loader<'a> {
    base: &'a Path,
    start: Timestamp,
    issues: Vec<Issue>,
}

impl Loader<'_> {
    fn issue(&mut self, field: impl Into<String>, reason: impl fmt::Display) {
        self.issues.push(Issue { field: field.into(), reason: reason.to_string() });
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    /// Records a missing file and returns `None`.
    fn existing(&mut self, field: &str, p: &Path) -> Option<PathBuf> {
        let full = self.resolve(p);
        if full.exists() {
            Some(full)
        } else {
            self.issue(field, format!("file not found: {}", full.display()));
            None
        }
    }

    fn trace(&mut self, field: &str, src: &TraceSource, unit: Unit, non_negative: bool) -> Option<Trace> {
        let trace = match src {
            TraceSource::Constant(v) => match Trace::constant(*v) {
                Ok(t) => t,
                Err(e) => {
                    self.issue(field, e);
                    return None;
                }
            },
            TraceSource::File(f) => {
                let path = self.existing(&format!("{field}.path"), &f.path)?;
                let defaults = TraceOptions::default();
                let opts = TraceOptions {
                    time_column: f.time_column.clone().unwrap_or(defaults.time_column),
                    value_column: f.value_column.clone().unwrap_or(defaults.value_column),
                    unit,
                    interpolation: f.interpolation,
                    scale: 1.0,
                    repeat: f.repeat,
                };
                match load_trace(&path, &opts).and_then(|t| t.scaled(f.scale)) {
                    Ok(t) => t,
                    Err(e) => {
                        self.issue(field, e);
                        return None;
                    }
                }
            }
        };
        let trace = trace.named(field).with_unit(unit);
        if non_negative {
            if let Some((t, v)) = trace.points().find(|(_, v)| *v < 0.0) {
                self.issue(field, format!("negative value {v} at {t}"));
                return None;
            }
        }
        if let Err(e) = trace.sample(self.start) {
            self.issue(field, format!("does not cover the scenario start: {e}"));
            return None;
        }
        Some(trace)
    }

    fn table(
        &mut self,
        field: &str,
        src: &TableSource,
        load: impl Fn(&Path) -> gridloop::Result<Vec<(f64, f64)>>,
    ) -> Option<Vec<(f64, f64)>> {
        match src {
            TableSource::Points(p) => Some(p.clone()),
            TableSource::File(p) => {
                let path = self.existing(field, p)?;
                self.check(field, load(&path))
            }
        }
    }

    fn check<T>(&mut self, field: &str, r: gridloop::Result<T>) -> Option<T> {
        match r {
            Ok(v) => Some(v),
            Err(e) => {
                self.issue(field, e);
                None
            }
        }
    }
}

pub fn read_scenario(path: &Path) -> Result<ScenarioFile, ScenarioError> {
    let fail = |reason: String| ScenarioError {
        file: path.to_path_buf(),
        issues: vec![Issue { field: String::new(), reason }],
    };
    let text = std::fs::read_to_string(path).map_err(|e| fail(format!("cannot read scenario: {e}")))?;
    toml::from_str(&text).map_err(|e| fail(e.to_string().trim_end().to_string()))
}

/// Parses, validates and builds a scenario.
pub fn load(path: &Path, overrides: &Overrides) -> Result<Prepared, ScenarioError> {
    let file = read_scenario(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    prepare(file, base, overrides).map_err(|issues| ScenarioError { file: path.to_path_buf(), issues })
}

pub fn prepare(file: ScenarioFile, base: &Path, overrides: &Overrides) -> Result<Prepared, Vec<Issue>> {
    let mut l = Loader { base, start: file.start, issues: Vec::new() };
    let mut warnings = Vec::new();
    let mut rows = Vec::new();

    let mode = overrides.mode.clone().or(file.mode.clone()).unwrap_or(ExecutionMode::Fast);
    let duration_s = overrides.until_s.unwrap_or(file.duration_s);
    if file.step_size_s == 0 {
        l.issue("step_size_s", "must be > 0");
    } else if duration_s == 0 || !duration_s.is_multiple_of(file.step_size_s as u64) {
        let field = if overrides.until_s.is_some() { "--until" } else { "duration_s" };
        l.issue(
            field,
            format!("{duration_s} s is not a positive multiple of the {} s step", file.step_size_s),
        );
    }
    if let ExecutionMode::Conditional { predicate, .. } = &mode {
        if predicate != "excess_le_zero" {
            l.issue("mode", format!("unknown predicate `{predicate}`"));
        }
    }

    let listen_src = match (&overrides.listen, file.api.enabled) {
        (Some(addr), _) => Some(("--listen", addr.clone())),
        (None, true) => Some(("api.listen", file.api.listen.clone())),
        (None, false) => None,
    };
    let listen = listen_src.and_then(|(field, addr)| match addr.parse::<SocketAddr>() {
        Ok(a) => Some(a),
        Err(e) => {
            l.issue(field, format!("invalid address `{addr}`: {e}"));
            None
        }
    });

    // ids are checked up front so the error can name both definitions
    let mut seen: HashMap<String, String> = HashMap::new();
    let mut claim = |l: &mut Loader, id: &str, field: String| {
        if id.is_empty() {
            l.issue(field, "id must not be empty");
        } else if let Some(first) = seen.get(id) {
            l.issue(field.clone(), format!("duplicate id `{id}` (also defined at {first})"));
        } else {
            seen.insert(id.to_string(), field);
        }
    };
    if let Some(ci) = &file.carbon_intensity {
        claim(&mut l, &ci.id, "carbon_intensity".into());
    }
    for (i, p) in file.producers.iter().enumerate() {
        claim(&mut l, p.id(), format!("producers[{i}]"));
    }
    for (i, c) in file.consumers.iter().enumerate() {
        claim(&mut l, c.node_id(), format!("consumers[{i}]"));
    }
    if let Some(b) = &file.battery {
        claim(&mut l, &b.id, "battery".into());
    }

    let mut subsystems: Vec<(String, Subsystem, i32)> = Vec::new();

    if let Some(ci) = &file.carbon_intensity {
        let trace = l.trace("carbon_intensity.trace", &ci.trace, Unit::GramsPerKwh, true);
        let forecast = ci.forecast_dir.as_ref().and_then(|dir| {
            let dir = l.existing("carbon_intensity.forecast_dir", dir)?;
            let opts = TraceOptions { unit: Unit::GramsPerKwh, ..TraceOptions::default() };
            l.check("carbon_intensity.forecast_dir", ForecastSet::load_dir(dir, &opts))
        });
        if let Some(trace) = trace {
            let mut signal = CarbonSignal::new(trace);
            signal.kind = ci.kind;
            signal.forecast = forecast.clone();
            let detail = match &forecast {
                Some(f) => format!("{:?} intensity, {} forecast issues", ci.kind, f.issue_times().count()),
                None => format!("{:?} intensity", ci.kind),
            };
            rows.push(SubsystemRow { id: ci.id.clone(), class: "signal", detail: detail.to_lowercase() });
            subsystems.push((ci.id.clone(), Subsystem::Signal(signal), 0));
        }
    }

    for (i, p) in file.producers.iter().enumerate() {
        let field = format!("producers[{i}]");
        match p {
            ProducerConfig::Solar { id, irradiance, area_m2, efficiency, order_hint } => {
                let spec = l.check(&field, SolarPanelSpec::new(*area_m2, *efficiency));
                if let Some(spec) = &spec {
                    warnings.extend(spec.warnings().into_iter().map(|w| format!("{field} (`{id}`): {w}")));
                }
                let trace = l.trace(&format!("{field}.irradiance"), irradiance, Unit::WattsPerSquareMeter, true);
                if let (Some(spec), Some(trace)) = (spec, trace) {
                    rows.push(SubsystemRow {
                        id: id.clone(),
                        class: "producer",
                        detail: format!("solar, {area_m2} m2 at {:.1}% efficiency", efficiency * 100.0),
                    });
                    subsystems.push((id.clone(), Subsystem::producer(SolarProducer::new(trace, spec)), *order_hint));
                }
            }
            ProducerConfig::Wind {
                id,
                wind_speed,
                power_curve,
                cut_in_mps,
                cut_out_mps,
                hub_height_m,
                reference_height_m,
                shear_exponent,
                order_hint,
            } => {
                let curve = l
                    .table(&format!("{field}.power_curve"), power_curve, |p| PowerCurve::load_csv(p).map(Vec::from))
                    .and_then(|pts| l.check(&format!("{field}.power_curve"), PowerCurve::new(pts)));
                let trace = l.trace(&format!("{field}.wind_speed"), wind_speed, Unit::MetersPerSecond, true);
                if let Some(curve) = curve {
                    let spec = WindTurbineSpec {
                        power_curve: curve,
                        cut_in_mps: *cut_in_mps,
                        cut_out_mps: *cut_out_mps,
                        hub_height_m: *hub_height_m,
                        reference_height_m: *reference_height_m,
                        shear_exponent: shear_exponent.unwrap_or(DEFAULT_SHEAR_EXPONENT),
                    };
                    let valid = l.check(&field, spec.validate()).is_some();
                    if let (true, Some(trace)) = (valid, trace) {
                        rows.push(SubsystemRow {
                            id: id.clone(),
                            class: "producer",
                            detail: format!("wind, cut-in {cut_in_mps} m/s, cut-out {cut_out_mps} m/s"),
                        });
                        subsystems.push((id.clone(), Subsystem::producer(WindProducer::new(trace, spec)), *order_hint));
                    }
                }
            }
            ProducerConfig::Trace { id, power, kind, order_hint } => {
                if let Some(trace) = l.trace(&format!("{field}.power"), power, Unit::Watts, true) {
                    rows.push(SubsystemRow {
                        id: id.clone(),
                        class: "producer",
                        detail: format!("{} power trace", format!("{kind:?}").to_lowercase()),
                    });
                    subsystems.push((id.clone(), Subsystem::producer(TraceProducer::new(trace, *kind)), *order_hint));
                }
            }
        }
    }

    for (i, c) in file.consumers.iter().enumerate() {
        let field = format!("consumers[{i}]");
        let id = c.node_id().to_string();
        let meter = match c {
            ConsumerConfig::Trace { power, .. } => l
                .trace(&format!("{field}.power"), power, Unit::Watts, true)
                .map(|t| NodeMeter::trace(id.clone(), t)),
            ConsumerConfig::Model { power_model, utilization, .. } => {
                let model = l
                    .table(&format!("{field}.power_model"), power_model, |p| {
                        PowerModel::load_csv(p).map(|m| m.load_points().to_vec())
                    })
                    .and_then(|pts| l.check(&format!("{field}.power_model"), PowerModel::new(pts)));
                let util = l.trace(&format!("{field}.utilization"), utilization, Unit::Fraction, false);
                if let Some(u) = &util {
                    if u.points().any(|(_, v)| !(0.0..=1.0).contains(&(v * u.scale()))) {
                        warnings.push(format!("{field}.utilization: values outside [0, 1] will be clamped"));
                    }
                }
                match (model, util) {
                    (Some(m), Some(u)) => Some(NodeMeter::model(id.clone(), m, u)),
                    _ => None,
                }
            }
            ConsumerConfig::Push { staleness_timeout_s, .. } => {
                if staleness_timeout_s.is_finite() && *staleness_timeout_s > 0.0 {
                    Some(NodeMeter::push(id.clone(), Duration::from_secs_f64(*staleness_timeout_s)))
                } else {
                    l.issue(format!("{field}.staleness_timeout_s"), "must be > 0");
                    None
                }
            }
        };
        if let Some(mut meter) = meter {
            if l.check(&format!("{field}.power_cap_w"), meter.set_cap(c.power_cap_w())).is_some() {
                let mut detail = format!("{} meter", meter.kind().label());
                if let Some(cap) = c.power_cap_w() {
                    detail.push_str(&format!(", cap {cap} W"));
                }
                rows.push(SubsystemRow { id: id.clone(), class: "consumer", detail });
                subsystems.push((id, Subsystem::Consumer(meter), c.order_hint()));
            }
        }
    }

    let overhead = match &file.overhead {
        None => OverheadModel::default(),
        Some(OverheadConfig { pue: Some(pue), table: None }) => OverheadModel::ConstantPue(*pue),
        Some(OverheadConfig { pue: None, table: Some(t) }) => l
            .table("overhead.table", t, |p| match OverheadModel::load_table(p)? {
                OverheadModel::Table(points) => Ok(points),
                OverheadModel::ConstantPue(_) => unreachable!("load_table always yields a table"),
            })
            .map(OverheadModel::Table)
            .unwrap_or_default(),
        Some(_) => {
            l.issue("overhead", "set exactly one of `pue` or `table`");
            OverheadModel::default()
        }
    };
    l.check("overhead", overhead.validate());

    if let Some(b) = &file.battery {
        let spec = BatterySpec {
            capacity_kwh: b.capacity_kwh,
            c_rate: b.c_rate,
            charge_efficiency: b.charge_efficiency,
            initial_soc_kwh: b.initial_soc_kwh,
        };
        let battery = l
            .check("battery", Battery::new(spec))
            .and_then(|mut bat| l.check("battery", bat.set_policy(b.min_soc_kwh, b.grid_charge_w)).map(|_| bat));
        if let Some(battery) = battery {
            rows.push(SubsystemRow {
                id: b.id.clone(),
                class: "storage",
                detail: format!(
                    "{} kWh, C-rate {}, charge efficiency {}, initial {} kWh",
                    b.capacity_kwh, b.c_rate, b.charge_efficiency, b.initial_soc_kwh
                ),
            });
            subsystems.push((b.id.clone(), Subsystem::Storage(battery), 0));
        }
    }

    let sim = if file.step_size_s > 0 {
        let mut sim = Simulation::new(file.start, file.step_size_s).map_err(|e| vec![Issue {
            field: "step_size_s".into(),
            reason: e.to_string(),
        }])?;
        l.check("overhead", sim.set_overhead(overhead));
        for (id, subsystem, hint) in subsystems {
            // duplicates are already reported with both locations
            if let Err(e) = sim.register(id.clone(), subsystem, hint) {
                if l.issues.is_empty() {
                    l.issue(id, e);
                }
            }
        }
        Some(sim)
    } else {
        None
    };

    match sim {
        Some(sim) if l.issues.is_empty() => {
            let order = sim.evaluation_order();
            rows.sort_by_key(|r| order.iter().position(|id| *id == r.id));
            Ok(Prepared {
                sim,
                mode,
                duration_s,
                listen,
                csv: overrides.out.clone().or_else(|| file.output.csv.as_ref().map(|p| l.resolve(p))),
                summary: file.output.summary.as_ref().map(|p| l.resolve(p)),
                subsystems: rows,
                warnings,
            })
        }
        _ => Err(l.issues),
    }
}
