//! The stepped simulation kernel.
//!
//! A [`Simulation`] owns the clock, the registered subsystems and the run
//! log. Each step covers `[now, now + step_size)` with piecewise-constant
//! power and evaluates, in order: pending control directives, the carbon
//! intensity signal, producers, consumers, and finally the battery/grid
//! balance. Within a class, subsystems run by `order_hint`, then by
//! registration order.
//!
//! [`Simulation::run`] adds wall-clock pacing on top of [`Simulation::step`].
//! Pacing never changes simulated values; a step that overruns its slot is
//! flagged `deadline_missed` and the kernel catches up without sleeping.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::Utc;
use serde::{Deserialize, Serialize};

use crate::consumers::{total_consumption, NodeMeter, NodeReading, OverheadModel};
use crate::control::{BatterySnapshot, ControlDirective, ControlPlane, DirectiveKey, ProducerReading, PublishedState};
use crate::error::{Error, Result};
use crate::generation::Producer;
use crate::microgrid::{balance, excess_le_zero};
use crate::runlog::RunSummary;
use crate::signals::{ForecastSet, Trace};
use crate::storage::{energy_kwh, Battery};
use crate::time::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimClock {
    start_epoch: Timestamp,
    now_s: u64,
    step_size_s: u32,
}

impl SimClock {
    pub fn new(start_epoch: Timestamp, step_size_s: u32) -> Result<Self> {
        if step_size_s == 0 {
            return Err(Error::config("step size must be a positive number of seconds"));
        }
        Ok(SimClock {
            start_epoch,
            now_s: 0,
            step_size_s,
        })
    }

    pub fn start_epoch(&self) -> Timestamp {
        self.start_epoch
    }

    /// Seconds since the start epoch.
    pub fn now_s(&self) -> u64 {
        self.now_s
    }

    pub fn step_size_s(&self) -> u32 {
        self.step_size_s
    }

    pub fn time(&self) -> Timestamp {
        self.start_epoch + self.now_s as i64
    }

    fn advance(&mut self) {
        self.now_s += self.step_size_s as u64;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExecutionMode {
    /// As fast as possible.
    Fast,
    /// Simulated time runs `factor` times faster than wall-clock time.
    Paced { factor: f64 },
    /// Fast while the named predicate holds for the previous record,
    /// paced otherwise.
    Conditional { predicate: String, factor: f64 },
}

impl ExecutionMode {
    pub fn real_time() -> Self {
        ExecutionMode::Paced { factor: 1.0 }
    }

    fn factor(&self) -> Option<f64> {
        match self {
            ExecutionMode::Fast => None,
            ExecutionMode::Paced { factor } | ExecutionMode::Conditional { factor, .. } => Some(*factor),
        }
    }
}

impl fmt::Display for ExecutionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExecutionMode::Fast => f.write_str("fast"),
            ExecutionMode::Paced { factor } if *factor == 1.0 => f.write_str("real"),
            ExecutionMode::Paced { factor } => write!(f, "scaled:{factor}"),
            ExecutionMode::Conditional { predicate, factor } => write!(f, "conditional:{predicate}:{factor}"),
        }
    }
}

fn parse_factor(s: &str) -> std::result::Result<f64, String> {
    let f: f64 = s.parse().map_err(|_| format!("invalid pacing factor `{s}`"))?;
    if !(f.is_finite() && f > 0.0) {
        return Err(format!("pacing factor must be > 0, got {s}"));
    }
    Ok(f)
}

/// `fast`, `real`, `scaled:<factor>` or `conditional:<predicate>:<factor>`.
impl FromStr for ExecutionMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        match parts.as_slice() {
            ["fast"] => Ok(ExecutionMode::Fast),
            ["real"] => Ok(ExecutionMode::real_time()),
            ["scaled", f] => Ok(ExecutionMode::Paced { factor: parse_factor(f)? }),
            ["conditional", p, f] if !p.is_empty() => Ok(ExecutionMode::Conditional {
                predicate: p.to_string(),
                factor: parse_factor(f)?,
            }),
            _ => Err(format!(
                "unknown mode `{s}` (expected fast, real, scaled:<f> or conditional:<predicate>:<f>)"
            )),
        }
    }
}

impl Serialize for ExecutionMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ExecutionMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// One step of simulated power flows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub time: Timestamp,
    pub production_w: f64,
    pub consumption_w: f64,
    /// Positive = charging.
    pub battery_power_w: f64,
    pub battery_soc_kwh: f64,
    /// Positive = import.
    pub grid_power_w: f64,
    pub carbon_intensity_gpkwh: f64,
    pub step_carbon_g: f64,
    pub deadline_missed: bool,
}

impl StepRecord {
    /// Residual of production - consumption - battery + grid; zero when the
    /// bus balances.
    pub fn balance_residual(&self) -> f64 {
        self.production_w - self.consumption_w - self.battery_power_w + self.grid_power_w
    }
}

/// Whether average or marginal intensities are being replayed. Metadata
/// only; the kernel treats the trace as opaque gCO2/kWh.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum IntensityKind {
    Average,
    Marginal,
    #[default]
    Unspecified,
}

pub struct CarbonSignal {
    pub trace: Trace,
    pub forecast: Option<ForecastSet>,
    pub kind: IntensityKind,
}

impl CarbonSignal {
    pub fn new(trace: Trace) -> Self {
        CarbonSignal {
            trace,
            forecast: None,
            kind: IntensityKind::Unspecified,
        }
    }

    pub fn with_forecast(mut self, forecast: ForecastSet) -> Self {
        self.forecast = Some(forecast);
        self
    }
}

pub enum Subsystem {
    Signal(CarbonSignal),
    Producer(Box<dyn Producer>),
    Consumer(NodeMeter),
    Storage(Battery),
}

impl Subsystem {
    pub fn producer(p: impl Producer + 'static) -> Self {
        Subsystem::Producer(Box::new(p))
    }

    fn class(&self) -> &'static str {
        match self {
            Subsystem::Signal(_) => "signal",
            Subsystem::Producer(_) => "producer",
            Subsystem::Consumer(_) => "consumer",
            Subsystem::Storage(_) => "storage",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SubsystemId(String);

impl SubsystemId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SubsystemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

struct Slot<T> {
    id: String,
    hint: i32,
    inner: T,
}

/// Inserts keeping slots ordered by hint, ties by insertion order.
fn insert_ordered<T>(slots: &mut Vec<Slot<T>>, slot: Slot<T>) {
    let at = slots.partition_point(|s| s.hint <= slot.hint);
    slots.insert(at, slot);
}

pub type Predicate = Arc<dyn Fn(&StepRecord) -> bool + Send + Sync>;

/// Wall-clock facts about one executed step; not part of the simulated
/// state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTiming {
    pub time: Timestamp,
    pub paced: bool,
    pub deadline_missed: bool,
    /// From slot start until the next step may begin.
    pub wall: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub summary: RunSummary,
    pub timings: Vec<StepTiming>,
}

#[derive(Debug, Clone, Copy, Default)]
struct Totals {
    steps: u64,
    deadlines_missed: u64,
    production_kwh: f64,
    consumption_kwh: f64,
    grid_import_kwh: f64,
    grid_export_kwh: f64,
    carbon_g: f64,
    stale_samples: u64,
    directives_applied: u64,
}

struct StepOutput {
    record: StepRecord,
    producers: Vec<ProducerReading>,
    nodes: Vec<NodeReading>,
}

pub struct Simulation {
    clock: SimClock,
    started: bool,
    ids: HashSet<String>,
    signal: Option<Slot<CarbonSignal>>,
    producers: Vec<Slot<Box<dyn Producer>>>,
    consumers: Vec<Slot<()>>,
    meters: Vec<NodeMeter>,
    battery: Option<Slot<Battery>>,
    initial_soc_kwh: f64,
    overhead: OverheadModel,
    predicates: HashMap<String, Predicate>,
    control: Arc<ControlPlane>,
    log: Vec<StepRecord>,
    totals: Totals,
    warned_stale: HashSet<String>,
}

impl Simulation {
    pub fn new(start: Timestamp, step_size_s: u32) -> Result<Self> {
        let clock = SimClock::new(start, step_size_s)?;
        let mut predicates: HashMap<String, Predicate> = HashMap::new();
        predicates.insert("excess_le_zero".to_string(), Arc::new(excess_le_zero));
        Ok(Simulation {
            clock,
            started: false,
            ids: HashSet::new(),
            signal: None,
            producers: Vec::new(),
            consumers: Vec::new(),
            meters: Vec::new(),
            battery: None,
            initial_soc_kwh: 0.0,
            overhead: OverheadModel::default(),
            predicates,
            control: Arc::new(ControlPlane::new(start, step_size_s)),
            log: Vec::new(),
            totals: Totals::default(),
            warned_stale: HashSet::new(),
        })
    }

    pub fn clock(&self) -> &SimClock {
        &self.clock
    }

    pub fn control_plane(&self) -> Arc<ControlPlane> {
        self.control.clone()
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.log
    }

    pub fn battery(&self) -> Option<&Battery> {
        self.battery.as_ref().map(|s| &s.inner)
    }

    pub fn meter(&self, node_id: &str) -> Option<&NodeMeter> {
        self.meters.iter().find(|m| m.node_id() == node_id)
    }

    fn ensure_not_started(&self) -> Result<()> {
        if self.started {
            return Err(Error::config("the simulation has already started"));
        }
        Ok(())
    }

    pub fn set_overhead(&mut self, overhead: OverheadModel) -> Result<()> {
        self.ensure_not_started()?;
        overhead.validate()?;
        self.overhead = overhead;
        Ok(())
    }

    pub fn register_predicate(
        &mut self,
        name: impl Into<String>,
        predicate: impl Fn(&StepRecord) -> bool + Send + Sync + 'static,
    ) {
        self.predicates.insert(name.into(), Arc::new(predicate));
    }

    pub fn register(&mut self, id: impl Into<String>, subsystem: Subsystem, order_hint: i32) -> Result<SubsystemId> {
        self.ensure_not_started()?;
        let id = id.into();
        if self.ids.contains(&id) {
            return Err(Error::config(format!("duplicate subsystem id `{id}`")));
        }
        let class = subsystem.class();
        match subsystem {
            Subsystem::Signal(signal) => {
                if let Some(existing) = &self.signal {
                    return Err(Error::config(format!(
                        "`{id}`: carbon intensity signal already provided by `{}`",
                        existing.id
                    )));
                }
                if let Some(f) = &signal.forecast {
                    self.control.set_forecast(Arc::new(f.clone()));
                }
                self.signal = Some(Slot { id: id.clone(), hint: order_hint, inner: signal });
            }
            Subsystem::Producer(p) => {
                insert_ordered(&mut self.producers, Slot { id: id.clone(), hint: order_hint, inner: p });
            }
            Subsystem::Consumer(meter) => {
                if meter.node_id() != id {
                    return Err(Error::config(format!(
                        "consumer id `{id}` does not match its node id `{}`",
                        meter.node_id()
                    )));
                }
                self.control.register_node(&id, meter.push_cell());
                let at = self.consumers.partition_point(|s| s.hint <= order_hint);
                self.consumers.insert(at, Slot { id: id.clone(), hint: order_hint, inner: () });
                self.meters.insert(at, meter);
            }
            Subsystem::Storage(battery) => {
                if let Some(existing) = &self.battery {
                    return Err(Error::config(format!(
                        "`{id}`: only one storage unit is supported, `{}` is already registered",
                        existing.id
                    )));
                }
                self.control.register_battery(*battery.spec());
                self.initial_soc_kwh = battery.state().soc_kwh;
                self.battery = Some(Slot { id: id.clone(), hint: order_hint, inner: battery });
            }
        }
        tracing::debug!(%id, class, order_hint, "registered subsystem");
        self.ids.insert(id.clone());
        Ok(SubsystemId(id))
    }

    /// Subsystem ids in the order a step evaluates them.
    pub fn evaluation_order(&self) -> Vec<String> {
        let mut out = Vec::new();
        out.extend(self.signal.iter().map(|s| s.id.clone()));
        out.extend(self.producers.iter().map(|s| s.id.clone()));
        out.extend(self.consumers.iter().map(|s| s.id.clone()));
        out.extend(self.battery.iter().map(|s| s.id.clone()));
        out
    }

    /// Executes one unpaced step.
    pub fn step(&mut self) -> Result<StepRecord> {
        let out = self.compute_step()?;
        Ok(self.commit_step(out, false))
    }

    fn apply_directive(&mut self, d: &ControlDirective) -> Result<()> {
        match &d.key {
            DirectiveKey::BatteryMinSoc | DirectiveKey::BatteryGridCharge => {
                let battery = self
                    .battery
                    .as_mut()
                    .ok_or_else(|| Error::config("no battery registered"))?;
                if d.key == DirectiveKey::BatteryMinSoc {
                    battery.inner.set_policy(d.value, None)
                } else {
                    battery.inner.set_policy(None, d.value)
                }
            }
            DirectiveKey::NodePowerCap(id) => self
                .meters
                .iter_mut()
                .find(|m| m.node_id() == id)
                .ok_or_else(|| Error::config(format!("unknown node `{id}`")))?
                .set_cap(d.value),
        }
    }

    fn note_stale(&mut self, id: &str, stale: bool) {
        if stale {
            self.totals.stale_samples += 1;
            if self.warned_stale.insert(id.to_string()) {
                tracing::warn!(subsystem = id, time = %self.clock.time(), "stale input, holding last value");
            }
        }
    }

    fn compute_step(&mut self) -> Result<StepOutput> {
        self.started = true;
        let t = self.clock.time();
        let dt = self.clock.step_size_s() as f64;

        for d in self.control.drain(t) {
            match self.apply_directive(&d) {
                Ok(()) => self.totals.directives_applied += 1,
                Err(e) => tracing::warn!(key = %d.key, error = %e, "dropping directive"),
            }
        }

        let ci = match &self.signal {
            Some(slot) => {
                let s = slot.inner.trace.sample(t).map_err(|e| Error::Subsystem {
                    id: slot.id.clone(),
                    source: Box::new(e),
                })?;
                let id = slot.id.clone();
                self.note_stale(&id, s.stale);
                s.value
            }
            None => 0.0,
        };

        let mut production_w = 0.0;
        let mut producers = Vec::with_capacity(self.producers.len());
        for slot in &self.producers {
            let s = slot.inner.power_w(t).map_err(|e| Error::Subsystem {
                id: slot.id.clone(),
                source: Box::new(e),
            })?;
            production_w += s.value;
            producers.push(ProducerReading {
                id: slot.id.clone(),
                kind: slot.inner.kind(),
                power_w: s.value,
                stale: s.stale,
            });
        }
        for r in &producers {
            self.note_stale(&r.id, r.stale);
        }

        let consumption = total_consumption(&self.meters, &self.overhead, t)?;

        let battery = self.battery.as_ref().map(|b| (b.inner.state(), b.inner.spec()));
        let outcome = balance(production_w, consumption.total_power_w, battery, ci, dt);
        if let (Some(slot), Some(update)) = (self.battery.as_mut(), outcome.battery.as_ref()) {
            slot.inner.commit(update, dt);
        }

        let record = StepRecord {
            time: t,
            production_w,
            consumption_w: consumption.total_power_w,
            battery_power_w: outcome.battery_power_w,
            battery_soc_kwh: self.battery().map_or(0.0, |b| b.state().soc_kwh),
            grid_power_w: outcome.grid.grid_power_w,
            carbon_intensity_gpkwh: ci,
            step_carbon_g: outcome.grid.carbon_g,
            deadline_missed: false,
        };
        Ok(StepOutput {
            record,
            producers,
            nodes: consumption.readings,
        })
    }

    fn commit_step(&mut self, out: StepOutput, deadline_missed: bool) -> StepRecord {
        let dt = self.clock.step_size_s() as f64;
        let mut record = out.record;
        record.deadline_missed = deadline_missed;

        let totals = &mut self.totals;
        totals.steps += 1;
        totals.deadlines_missed += deadline_missed as u64;
        totals.production_kwh += energy_kwh(record.production_w, dt);
        totals.consumption_kwh += energy_kwh(record.consumption_w, dt);
        totals.grid_import_kwh += energy_kwh(record.grid_power_w.max(0.0), dt);
        totals.grid_export_kwh += energy_kwh((-record.grid_power_w).max(0.0), dt);
        totals.carbon_g += record.step_carbon_g;
        for n in &out.nodes {
            self.note_stale(&n.node_id, n.stale);
        }

        self.clock.advance();
        let battery = self.battery().map(|b| BatterySnapshot {
            soc_kwh: b.state().soc_kwh,
            capacity_kwh: b.spec().capacity_kwh,
            min_soc_kwh: b.state().min_soc_kwh,
            grid_charge_w: b.state().grid_charge_w,
            battery_power_w: record.battery_power_w,
            throughput: *b.throughput(),
        });
        self.control.publish(PublishedState {
            sim_time: record.time,
            step_index: self.totals.steps - 1,
            step_committed_at: Utc::now(),
            record: record.clone(),
            producers: out.producers,
            nodes: out.nodes,
            battery,
        });
        self.log.push(record.clone());
        record
    }

    /// Cumulative totals over every step executed so far.
    pub fn summary(&self) -> RunSummary {
        let t = &self.totals;
        let (final_soc, throughput) = match self.battery() {
            Some(b) => (b.state().soc_kwh, *b.throughput()),
            None => (0.0, Default::default()),
        };
        RunSummary {
            steps_executed: t.steps,
            deadlines_missed: t.deadlines_missed,
            total_production_kwh: t.production_kwh,
            total_consumption_kwh: t.consumption_kwh,
            total_grid_import_kwh: t.grid_import_kwh,
            total_grid_export_kwh: t.grid_export_kwh,
            battery_charged_kwh: throughput.charged_kwh,
            battery_discharged_kwh: throughput.discharged_kwh,
            battery_loss_kwh: throughput.loss_kwh,
            initial_soc_kwh: self.initial_soc_kwh,
            final_soc_kwh: final_soc,
            total_carbon_g: t.carbon_g,
            stale_samples: t.stale_samples,
            directives_applied: t.directives_applied,
        }
    }

    pub fn validate_run(&self, until_s: u64, mode: &ExecutionMode) -> Result<()> {
        let step = self.clock.step_size_s() as u64;
        if until_s == 0 || !until_s.is_multiple_of(step) {
            return Err(Error::config(format!(
                "run length {until_s} s is not a positive multiple of the {step} s step"
            )));
        }
        if let Some(f) = mode.factor() {
            if !(f.is_finite() && f > 0.0) {
                return Err(Error::config(format!("pacing factor must be > 0, got {f}")));
            }
        }
        if let ExecutionMode::Conditional { predicate, .. } = mode {
            if !self.predicates.contains_key(predicate) {
                return Err(Error::config(format!("unknown predicate `{predicate}`")));
            }
        }
        Ok(())
    }

    /// Runs `until_s / step_size` steps from the current clock.
    pub fn run(&mut self, until_s: u64, mode: &ExecutionMode) -> Result<RunReport> {
        self.run_with(until_s, mode, |_| {})
    }

    /// Like [`run`](Self::run), calling `on_step` after each committed step.
    pub fn run_with(
        &mut self,
        until_s: u64,
        mode: &ExecutionMode,
        mut on_step: impl FnMut(&StepRecord),
    ) -> Result<RunReport> {
        self.validate_run(until_s, mode)?;
        let step = self.clock.step_size_s() as u64;
        let n = until_s / step;
        let predicate = match mode {
            ExecutionMode::Conditional { predicate, .. } => Some(self.predicates[predicate].clone()),
            _ => None,
        };
        let factor = mode.factor().unwrap_or(1.0);

        // wall-clock instant and sim time at which the current paced stretch began
        let mut anchor: Option<(Instant, Timestamp)> = None;
        let mut timings = Vec::with_capacity(n as usize);

        for _ in 0..n {
            let paced = match (mode, &predicate) {
                (ExecutionMode::Fast, _) => false,
                (_, Some(p)) => self.log.last().is_some_and(|prev| !p(prev)),
                _ => true,
            };
            let slot_start = Instant::now();
            let t = self.clock.time();
            if !paced {
                anchor = None;
            }
            let origin = paced.then(|| *anchor.get_or_insert((slot_start, t)));

            let out = self.compute_step()?;

            let slot_end = origin.map(|(wall0, sim0)| {
                let sim_elapsed = (t - sim0) as f64 + step as f64;
                wall0 + Duration::from_secs_f64(sim_elapsed / factor)
            });
            let missed = slot_end.is_some_and(|end| Instant::now() > end);
            if missed {
                tracing::warn!(time = %t, "step exceeded its wall-clock slot");
            }
            let record = self.commit_step(out, missed);
            on_step(&record);

            if let Some(end) = slot_end {
                let now = Instant::now();
                if end > now {
                    std::thread::sleep(end - now);
                }
            }
            timings.push(StepTiming {
                time: t,
                paced,
                deadline_missed: missed,
                wall: slot_start.elapsed(),
            });
        }

        Ok(RunReport {
            summary: self.summary(),
            timings,
        })
    }
}
