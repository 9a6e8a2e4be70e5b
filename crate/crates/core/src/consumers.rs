//! Compute-side power demand.
//!
//! Every node has a [`NodeMeter`]: a push meter fed over the API by an
//! external agent, a utilization-driven [`PowerModel`], or a replayed power
//! trace. Facility overhead on top of IT power is an [`OverheadModel`].

use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::generation::{interpolate_clamped, read_pairs};
use crate::signals::Trace;
use crate::time::Timestamp;

/// Piecewise-linear utilization to power ladder (SPECpower style).
#[derive(Debug, Clone, PartialEq)]
pub struct PowerModel {
    load_points: Vec<(f64, f64)>,
}

impl PowerModel {
    pub fn new(load_points: Vec<(f64, f64)>) -> Result<Self> {
        if load_points.len() < 2 {
            return Err(Error::config("power model needs load points at 0 and 1"));
        }
        if load_points[0].0 != 0.0 || load_points[load_points.len() - 1].0 != 1.0 {
            return Err(Error::config("power model load points must start at 0 and end at 1"));
        }
        if load_points.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::config("power model utilizations must be strictly increasing"));
        }
        if load_points.iter().any(|(_, p)| !p.is_finite() || *p < 0.0) {
            return Err(Error::config("power model powers must be finite and >= 0"));
        }
        Ok(PowerModel { load_points })
    }

    /// Reads a `utilization,power_w` CSV.
    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        PowerModel::new(read_pairs(path.as_ref(), "utilization", "power_w")?)
    }

    pub fn load_points(&self) -> &[(f64, f64)] {
        &self.load_points
    }

    /// Power at `utilization`, clamped into [0, 1].
    pub fn power_at(&self, utilization: f64) -> f64 {
        interpolate_clamped(&self.load_points, utilization.clamp(0.0, 1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PushReading {
    pub power_w: f64,
    pub received: Instant,
}

/// Last-value cell written by API handlers and read by the kernel once per
/// step.
#[derive(Debug, Default)]
pub struct PushCell {
    latest: Mutex<Option<PushReading>>,
}

impl PushCell {
    pub fn push(&self, power_w: f64) -> Result<()> {
        if !(power_w.is_finite() && power_w >= 0.0) {
            return Err(Error::input(format!("pushed power must be >= 0 W, got {power_w}")));
        }
        let reading = PushReading {
            power_w,
            received: Instant::now(),
        };
        *self.latest.lock().unwrap_or_else(|e| e.into_inner()) = Some(reading);
        Ok(())
    }

    pub fn latest(&self) -> Option<PushReading> {
        *self.latest.lock().unwrap_or_else(|e| e.into_inner())
    }
}

pub enum MeterKind {
    /// Measurements pushed by a node agent. Staleness is judged against the
    /// wall clock, since that is the agent's clock.
    Push {
        cell: Arc<PushCell>,
        staleness_timeout: Duration,
    },
    Model {
        model: PowerModel,
        utilization: Trace,
    },
    Trace(Trace),
}

impl MeterKind {
    pub fn label(&self) -> &'static str {
        match self {
            MeterKind::Push { .. } => "push",
            MeterKind::Model { .. } => "model",
            MeterKind::Trace(_) => "trace",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeReading {
    pub node_id: String,
    pub power_w: f64,
    pub stale: bool,
    pub cap_w: Option<f64>,
}

pub struct NodeMeter {
    node_id: String,
    kind: MeterKind,
    cap_w: Option<f64>,
}

impl NodeMeter {
    pub fn new(node_id: impl Into<String>, kind: MeterKind) -> Self {
        NodeMeter {
            node_id: node_id.into(),
            kind,
            cap_w: None,
        }
    }

    pub fn push(node_id: impl Into<String>, staleness_timeout: Duration) -> Self {
        NodeMeter::new(
            node_id,
            MeterKind::Push {
                cell: Arc::new(PushCell::default()),
                staleness_timeout,
            },
        )
    }

    pub fn model(node_id: impl Into<String>, model: PowerModel, utilization: Trace) -> Self {
        NodeMeter::new(node_id, MeterKind::Model { model, utilization })
    }

    pub fn trace(node_id: impl Into<String>, trace: Trace) -> Self {
        NodeMeter::new(node_id, MeterKind::Trace(trace))
    }

    pub fn node_id(&self) -> &str {
        &self.node_id
    }

    pub fn kind(&self) -> &MeterKind {
        &self.kind
    }

    pub fn cap_w(&self) -> Option<f64> {
        self.cap_w
    }

    pub fn push_cell(&self) -> Option<Arc<PushCell>> {
        match &self.kind {
            MeterKind::Push { cell, .. } => Some(cell.clone()),
            _ => None,
        }
    }

    pub fn set_cap(&mut self, cap_w: Option<f64>) -> Result<()> {
        validate_cap(cap_w)?;
        self.cap_w = cap_w;
        Ok(())
    }

    /// Power drawn by the node at `t`, after applying the cap.
    pub fn read(&self, t: Timestamp) -> Result<NodeReading> {
        let (raw, stale) = match &self.kind {
            MeterKind::Push {
                cell,
                staleness_timeout,
            } => match cell.latest() {
                Some(r) => (r.power_w, r.received.elapsed() > *staleness_timeout),
                // never pushed: report nothing, but visibly
                None => (0.0, true),
            },
            MeterKind::Model { model, utilization } => {
                let s = utilization.sample(t)?;
                if !(0.0..=1.0).contains(&s.value) {
                    tracing::warn!(
                        node = %self.node_id,
                        utilization = s.value,
                        "utilization outside [0, 1], clamping"
                    );
                }
                (model.power_at(s.value), s.stale)
            }
            MeterKind::Trace(trace) => {
                let s = trace.sample(t)?;
                if s.value < 0.0 {
                    return Err(Error::input(format!(
                        "trace `{}` yields negative power {} W at {t}",
                        trace.name(),
                        s.value
                    )));
                }
                (s.value, s.stale)
            }
        };
        let power_w = match self.cap_w {
            Some(cap) => raw.min(cap),
            None => raw,
        };
        Ok(NodeReading {
            node_id: self.node_id.clone(),
            power_w,
            stale,
            cap_w: self.cap_w,
        })
    }
}

pub fn validate_cap(cap_w: Option<f64>) -> Result<()> {
    match cap_w {
        Some(c) if !(c.is_finite() && c >= 0.0) => {
            Err(Error::input(format!("power cap must be >= 0 W, got {c}")))
        }
        _ => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OverheadModel {
    ConstantPue(f64),
    /// (IT power W, total facility power W), interpolated on IT power.
    Table(Vec<(f64, f64)>),
}

impl Default for OverheadModel {
    fn default() -> Self {
        OverheadModel::ConstantPue(1.0)
    }
}

impl OverheadModel {
    pub fn validate(&self) -> Result<()> {
        match self {
            OverheadModel::ConstantPue(pue) if !(pue.is_finite() && *pue >= 1.0) => {
                Err(Error::config(format!("PUE must be >= 1, got {pue}")))
            }
            OverheadModel::ConstantPue(_) => Ok(()),
            OverheadModel::Table(points) => {
                if points.is_empty() {
                    return Err(Error::config("overhead table is empty"));
                }
                if points.windows(2).any(|w| w[1].0 <= w[0].0 || w[1].1 < w[0].1) {
                    return Err(Error::config(
                        "overhead table must have increasing IT power and non-decreasing total power",
                    ));
                }
                if points.iter().any(|(it, total)| !total.is_finite() || *it < 0.0 || total < it) {
                    return Err(Error::config("overhead table total power must be >= IT power"));
                }
                Ok(())
            }
        }
    }

    /// Reads an `it_power_w,total_power_w` CSV.
    pub fn load_table(path: impl AsRef<Path>) -> Result<Self> {
        let model = OverheadModel::Table(read_pairs(path.as_ref(), "it_power_w", "total_power_w")?);
        model.validate()?;
        Ok(model)
    }

    /// Total facility power for a given IT power. Table lookups hold their
    /// endpoint values and never report less than the IT power itself.
    pub fn total_power(&self, it_power_w: f64) -> f64 {
        match self {
            OverheadModel::ConstantPue(pue) => it_power_w * pue,
            OverheadModel::Table(points) => interpolate_clamped(points, it_power_w).max(it_power_w),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Consumption {
    pub it_power_w: f64,
    pub total_power_w: f64,
    pub readings: Vec<NodeReading>,
}

/// Reads every meter at `t` and applies facility overhead.
///
/// Node powers are summed in ascending order so the result does not depend
/// on meter order.
pub fn total_consumption(meters: &[NodeMeter], overhead: &OverheadModel, t: Timestamp) -> Result<Consumption> {
    let readings = meters
        .iter()
        .map(|m| {
            m.read(t).map_err(|e| Error::Subsystem {
                id: m.node_id.clone(),
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut powers: Vec<f64> = readings.iter().map(|r| r.power_w).collect();
    powers.sort_by(f64::total_cmp);
    let it_power_w: f64 = powers.iter().sum();
    Ok(Consumption {
        it_power_w,
        total_power_w: overhead.total_power(it_power_w),
        readings,
    })
}
