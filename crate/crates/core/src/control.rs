//! State shared between the kernel and the API service.
//!
//! Three things cross the boundary:
//!
//! * the published snapshot of the last committed step, swapped atomically
//!   so readers never block the kernel and never see a torn step;
//! * the directive window, where control writes collect until the kernel
//!   drains it at the start of the next step (last writer per key wins);
//! * per-node push cells for externally measured power.
//!
//! A directive acknowledged with `effective_at = T` is applied to the step
//! starting at `T` and is therefore visible in every snapshot from step `T`
//! on, and in none before.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, Mutex, RwLock};

use arc_swap::ArcSwapOption;
use chrono::{DateTime, Utc};
use serde::Serialize;
use thiserror::Error;

use crate::consumers::{validate_cap, NodeReading, PushCell};
use crate::generation::ProducerKind;
use crate::signals::{ForecastSet, ForecastWindow};
use crate::sim::StepRecord;
use crate::storage::{validate_grid_charge, validate_min_soc, BatterySpec, Throughput};
use crate::time::Timestamp;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DirectiveKey {
    BatteryMinSoc,
    BatteryGridCharge,
    NodePowerCap(String),
}

impl fmt::Display for DirectiveKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DirectiveKey::BatteryMinSoc => f.write_str("battery.min_soc"),
            DirectiveKey::BatteryGridCharge => f.write_str("battery.grid_charge_w"),
            DirectiveKey::NodePowerCap(id) => write!(f, "node.{id}.power_cap_w"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlDirective {
    pub key: DirectiveKey,
    /// `None` only for clearing a node power cap.
    pub value: Option<f64>,
    pub received_at: DateTime<Utc>,
}

#[derive(Debug, Error, PartialEq)]
pub enum ControlError {
    #[error("{0}")]
    Validation(String),
    #[error("{0} not found")]
    NotFound(String),
    #[error("node `{0}` is not a push meter")]
    NotPushMeter(String),
    #[error("no step has been committed yet")]
    Unavailable,
    #[error("{0}")]
    NoForecast(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProducerReading {
    pub id: String,
    pub kind: ProducerKind,
    pub power_w: f64,
    pub stale: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatterySnapshot {
    pub soc_kwh: f64,
    pub capacity_kwh: f64,
    pub min_soc_kwh: f64,
    pub grid_charge_w: f64,
    pub battery_power_w: f64,
    pub throughput: Throughput,
}

/// Everything readers may see about one committed step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PublishedState {
    pub sim_time: Timestamp,
    pub step_index: u64,
    pub step_committed_at: DateTime<Utc>,
    pub record: StepRecord,
    pub producers: Vec<ProducerReading>,
    pub nodes: Vec<NodeReading>,
    pub battery: Option<BatterySnapshot>,
}

impl PublishedState {
    pub fn node(&self, id: &str) -> Option<&NodeReading> {
        self.nodes.iter().find(|n| n.node_id == id)
    }
}

#[derive(Default)]
struct Registry {
    battery: Option<BatterySpec>,
    nodes: BTreeMap<String, Option<Arc<PushCell>>>,
    forecast: Option<Arc<ForecastSet>>,
}

struct Window {
    pending: BTreeMap<DirectiveKey, ControlDirective>,
    next_commit: Timestamp,
    received: u64,
}

pub struct ControlPlane {
    step_size_s: u32,
    registry: RwLock<Registry>,
    window: Mutex<Window>,
    published: ArcSwapOption<PublishedState>,
}

impl ControlPlane {
    pub(crate) fn new(first_step: Timestamp, step_size_s: u32) -> Self {
        ControlPlane {
            step_size_s,
            registry: RwLock::new(Registry::default()),
            window: Mutex::new(Window {
                pending: BTreeMap::new(),
                next_commit: first_step,
                received: 0,
            }),
            published: ArcSwapOption::empty(),
        }
    }

    pub fn step_size_s(&self) -> u32 {
        self.step_size_s
    }

    pub(crate) fn register_battery(&self, spec: BatterySpec) {
        self.registry_mut().battery = Some(spec);
    }

    pub(crate) fn register_node(&self, id: &str, push: Option<Arc<PushCell>>) {
        self.registry_mut().nodes.insert(id.to_string(), push);
    }

    pub(crate) fn set_forecast(&self, set: Arc<ForecastSet>) {
        self.registry_mut().forecast = Some(set);
    }

    fn registry(&self) -> std::sync::RwLockReadGuard<'_, Registry> {
        self.registry.read().unwrap_or_else(|e| e.into_inner())
    }

    fn registry_mut(&self) -> std::sync::RwLockWriteGuard<'_, Registry> {
        self.registry.write().unwrap_or_else(|e| e.into_inner())
    }

    fn window(&self) -> std::sync::MutexGuard<'_, Window> {
        self.window.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn battery_spec(&self) -> Option<BatterySpec> {
        self.registry().battery
    }

    pub fn has_node(&self, id: &str) -> bool {
        self.registry().nodes.contains_key(id)
    }

    pub fn node_ids(&self) -> Vec<String> {
        self.registry().nodes.keys().cloned().collect()
    }

    pub fn has_forecast(&self) -> bool {
        self.registry().forecast.is_some()
    }

    /// Latest committed step, if any.
    pub fn snapshot(&self) -> Option<Arc<PublishedState>> {
        self.published.load_full()
    }

    pub(crate) fn publish(&self, state: PublishedState) {
        self.published.store(Some(Arc::new(state)));
    }

    /// Simulation time of the step that will pick up a directive submitted now.
    pub fn next_commit(&self) -> Timestamp {
        self.window().next_commit
    }

    /// Number of control writes accepted so far, including superseded ones.
    pub fn directives_received(&self) -> u64 {
        self.window().received
    }

    pub fn pending(&self) -> usize {
        self.window().pending.len()
    }

    /// Validates and enqueues battery policy changes. Either both fields are
    /// accepted or neither is.
    pub fn set_battery_policy(
        &self,
        min_soc_kwh: Option<f64>,
        grid_charge_w: Option<f64>,
    ) -> Result<Timestamp, ControlError> {
        let spec = self
            .battery_spec()
            .ok_or_else(|| ControlError::NotFound("battery".into()))?;
        if min_soc_kwh.is_none() && grid_charge_w.is_none() {
            return Err(ControlError::Validation(
                "expected min_soc_kwh and/or grid_charge_w".into(),
            ));
        }
        if let Some(v) = min_soc_kwh {
            validate_min_soc(&spec, v).map_err(|e| ControlError::Validation(e.to_string()))?;
        }
        if let Some(v) = grid_charge_w {
            validate_grid_charge(v).map_err(|e| ControlError::Validation(e.to_string()))?;
        }
        let mut entries = Vec::new();
        if let Some(v) = min_soc_kwh {
            entries.push((DirectiveKey::BatteryMinSoc, Some(v)));
        }
        if let Some(v) = grid_charge_w {
            entries.push((DirectiveKey::BatteryGridCharge, Some(v)));
        }
        Ok(self.enqueue(entries))
    }

    pub fn set_power_cap(&self, node_id: &str, cap_w: Option<f64>) -> Result<Timestamp, ControlError> {
        if !self.has_node(node_id) {
            return Err(ControlError::NotFound(format!("node `{node_id}`")));
        }
        validate_cap(cap_w).map_err(|e| ControlError::Validation(e.to_string()))?;
        Ok(self.enqueue(vec![(DirectiveKey::NodePowerCap(node_id.to_string()), cap_w)]))
    }

    fn enqueue(&self, entries: Vec<(DirectiveKey, Option<f64>)>) -> Timestamp {
        let received_at = Utc::now();
        let mut window = self.window();
        for (key, value) in entries {
            window.received += 1;
            window.pending.insert(
                key.clone(),
                ControlDirective {
                    key,
                    value,
                    received_at,
                },
            );
        }
        window.next_commit
    }

    /// Takes every pending directive for the step starting at `step_time`.
    pub(crate) fn drain(&self, step_time: Timestamp) -> Vec<ControlDirective> {
        let mut window = self.window();
        window.next_commit = step_time + self.step_size_s as i64;
        std::mem::take(&mut window.pending).into_values().collect()
    }

    /// Stores a measurement from a node agent; picked up at the next step.
    pub fn push_node_power(&self, node_id: &str, power_w: f64) -> Result<(), ControlError> {
        let cell = {
            let registry = self.registry();
            match registry.nodes.get(node_id) {
                None => return Err(ControlError::NotFound(format!("node `{node_id}`"))),
                Some(None) => return Err(ControlError::NotPushMeter(node_id.to_string())),
                Some(Some(cell)) => cell.clone(),
            }
        };
        cell.push(power_w)
            .map_err(|e| ControlError::Validation(e.to_string()))
    }

    /// Committed cap for a node, as last published.
    pub fn power_cap(&self, node_id: &str) -> Result<Option<f64>, ControlError> {
        if !self.has_node(node_id) {
            return Err(ControlError::NotFound(format!("node `{node_id}`")));
        }
        Ok(self
            .snapshot()
            .and_then(|s| s.node(node_id).and_then(|n| n.cap_w)))
    }

    /// Forecast as available at the last committed simulation time.
    pub fn forecast(&self, horizon_s: u64) -> Result<(Timestamp, ForecastWindow), ControlError> {
        let set = self
            .registry()
            .forecast
            .clone()
            .ok_or_else(|| ControlError::NotFound("forecast set".into()))?;
        let snap = self.snapshot().ok_or(ControlError::Unavailable)?;
        let window = set
            .forecast(snap.sim_time, horizon_s)
            .map_err(|e| ControlError::NoForecast(e.to_string()))?;
        Ok((snap.sim_time, window))
    }
}
