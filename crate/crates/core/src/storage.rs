//! High-level battery model.
//!
//! State of charge is integrated linearly in kWh. Terminal power is clamped
//! symmetrically to `c_rate * capacity`, conversion loss is charged entirely
//! on the way in (`charge_efficiency`), and discharge stops at the run-time
//! settable `min_soc_kwh` floor. Requests are never rejected, only clamped.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SECONDS_PER_HOUR: f64 = 3600.0;
const W_PER_KW: f64 = 1000.0;

/// Energy in kWh delivered by `power_w` over `dt_s`.
pub fn energy_kwh(power_w: f64, dt_s: f64) -> f64 {
    power_w * dt_s / SECONDS_PER_HOUR / W_PER_KW
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatterySpec {
    pub capacity_kwh: f64,
    /// Maximum |power| as a multiple of capacity per hour.
    pub c_rate: f64,
    pub charge_efficiency: f64,
    pub initial_soc_kwh: f64,
}

impl BatterySpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.capacity_kwh.is_finite() && self.capacity_kwh > 0.0) {
            return Err(Error::config(format!(
                "battery capacity must be > 0 kWh, got {}",
                self.capacity_kwh
            )));
        }
        if !(self.c_rate.is_finite() && self.c_rate >= 0.0) {
            return Err(Error::config(format!("c_rate must be >= 0, got {}", self.c_rate)));
        }
        if !(self.charge_efficiency > 0.0 && self.charge_efficiency <= 1.0) {
            return Err(Error::config(format!(
                "charge efficiency must be in (0, 1], got {}",
                self.charge_efficiency
            )));
        }
        if !(self.initial_soc_kwh >= 0.0 && self.initial_soc_kwh <= self.capacity_kwh) {
            return Err(Error::config(format!(
                "initial soc {} kWh outside [0, {}]",
                self.initial_soc_kwh, self.capacity_kwh
            )));
        }
        Ok(())
    }

    pub fn max_power_w(&self) -> f64 {
        self.c_rate * self.capacity_kwh * W_PER_KW
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatteryState {
    pub soc_kwh: f64,
    pub min_soc_kwh: f64,
    /// Forced charging from the grid, added on top of the balancing request.
    pub grid_charge_w: f64,
}

impl BatteryState {
    pub fn initial(spec: &BatterySpec) -> Self {
        BatteryState {
            soc_kwh: spec.initial_soc_kwh,
            min_soc_kwh: 0.0,
            grid_charge_w: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatteryUpdate {
    /// Terminal power actually drawn (positive) or delivered (negative).
    pub accepted_power_w: f64,
    pub state: BatteryState,
    /// Conversion loss incurred by this update.
    pub loss_kwh: f64,
}

pub fn battery_update(
    state: &BatteryState,
    spec: &BatterySpec,
    requested_power_w: f64,
    dt_s: f64,
) -> BatteryUpdate {
    debug_assert!(dt_s > 0.0);
    let max_w = spec.max_power_w();
    let p = requested_power_w.clamp(-max_w, max_w);
    let soc = state.soc_kwh;
    let mut next = *state;

    if p > 0.0 {
        let eta = spec.charge_efficiency;
        let headroom = (spec.capacity_kwh - soc).max(0.0);
        let stored = energy_kwh(p, dt_s) * eta;
        let ceiling = spec.capacity_kwh.max(soc);
        let accepted = if stored > headroom {
            next.soc_kwh = ceiling;
            headroom * SECONDS_PER_HOUR * W_PER_KW / (dt_s * eta)
        } else {
            next.soc_kwh = (soc + stored).min(ceiling);
            p
        };
        BatteryUpdate {
            accepted_power_w: accepted,
            state: next,
            loss_kwh: energy_kwh(accepted, dt_s) - (next.soc_kwh - soc),
        }
    } else if p < 0.0 {
        let available = (soc - state.min_soc_kwh).max(0.0);
        let drawn = -energy_kwh(p, dt_s);
        if drawn > available {
            if available > 0.0 {
                // floor - soc == -available exactly
                next.soc_kwh = state.min_soc_kwh;
            }
            BatteryUpdate {
                accepted_power_w: -available * SECONDS_PER_HOUR * W_PER_KW / dt_s,
                state: next,
                loss_kwh: 0.0,
            }
        } else {
            next.soc_kwh = (soc - drawn).max(state.min_soc_kwh.min(soc));
            BatteryUpdate {
                accepted_power_w: p,
                state: next,
                loss_kwh: 0.0,
            }
        }
    } else {
        BatteryUpdate {
            accepted_power_w: 0.0,
            state: next,
            loss_kwh: 0.0,
        }
    }
}

/// Updates only the provided policy fields.
pub fn set_policy(
    state: &BatteryState,
    spec: &BatterySpec,
    min_soc_kwh: Option<f64>,
    grid_charge_w: Option<f64>,
) -> Result<BatteryState> {
    let mut next = *state;
    if let Some(min_soc) = min_soc_kwh {
        validate_min_soc(spec, min_soc)?;
        next.min_soc_kwh = min_soc;
    }
    if let Some(rate) = grid_charge_w {
        validate_grid_charge(rate)?;
        next.grid_charge_w = rate;
    }
    Ok(next)
}

pub fn validate_min_soc(spec: &BatterySpec, min_soc_kwh: f64) -> Result<()> {
    if !(min_soc_kwh >= 0.0 && min_soc_kwh <= spec.capacity_kwh) {
        return Err(Error::input(format!(
            "min_soc_kwh {min_soc_kwh} outside [0, {}]",
            spec.capacity_kwh
        )));
    }
    Ok(())
}

pub fn validate_grid_charge(grid_charge_w: f64) -> Result<()> {
    if !(grid_charge_w.is_finite() && grid_charge_w >= 0.0) {
        return Err(Error::input(format!("grid_charge_w must be >= 0, got {grid_charge_w}")));
    }
    Ok(())
}

/// Cumulative terminal energy counters, exposed for external aging models.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Throughput {
    pub charged_kwh: f64,
    pub discharged_kwh: f64,
    pub loss_kwh: f64,
}

/// A battery with its spec, mutable state and throughput counters.
#[derive(Debug, Clone, PartialEq)]
pub struct Battery {
    spec: BatterySpec,
    state: BatteryState,
    throughput: Throughput,
}

impl Battery {
    pub fn new(spec: BatterySpec) -> Result<Self> {
        spec.validate()?;
        Ok(Battery {
            state: BatteryState::initial(&spec),
            spec,
            throughput: Throughput::default(),
        })
    }

    pub fn spec(&self) -> &BatterySpec {
        &self.spec
    }

    pub fn state(&self) -> &BatteryState {
        &self.state
    }

    pub fn throughput(&self) -> &Throughput {
        &self.throughput
    }

    pub fn set_policy(&mut self, min_soc_kwh: Option<f64>, grid_charge_w: Option<f64>) -> Result<()> {
        self.state = set_policy(&self.state, &self.spec, min_soc_kwh, grid_charge_w)?;
        Ok(())
    }

    /// Applies a request for `dt_s` and returns the accepted terminal power.
    pub fn apply(&mut self, requested_power_w: f64, dt_s: f64) -> f64 {
        let update = battery_update(&self.state, &self.spec, requested_power_w, dt_s);
        self.commit(&update, dt_s);
        update.accepted_power_w
    }

    /// Adopts an update computed against the current state.
    pub fn commit(&mut self, update: &BatteryUpdate, dt_s: f64) {
        let terminal = energy_kwh(update.accepted_power_w, dt_s);
        if terminal > 0.0 {
            self.throughput.charged_kwh += terminal;
        } else {
            self.throughput.discharged_kwh -= terminal;
        }
        self.throughput.loss_kwh += update.loss_kwh;
        self.state = update.state;
    }
}
