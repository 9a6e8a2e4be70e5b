//! Single-bus power balance with carbon accounting.
//!
//! Producers are netted against consumers, the battery absorbs or supplies
//! the difference first (plus any forced grid charging), and the grid
//! closes whatever is left. Only imports carry carbon; exports earn no
//! credit.

use serde::Serialize;

use crate::sim::StepRecord;
use crate::storage::{battery_update, energy_kwh, BatterySpec, BatteryState, BatteryUpdate};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridExchange {
    /// Positive = import.
    pub grid_power_w: f64,
    pub energy_kwh: f64,
    pub carbon_g: f64,
}

impl GridExchange {
    pub fn new(grid_power_w: f64, ci_gpkwh: f64, dt_s: f64) -> Self {
        GridExchange {
            grid_power_w,
            energy_kwh: energy_kwh(grid_power_w, dt_s),
            carbon_g: import_carbon_g(grid_power_w, ci_gpkwh, dt_s),
        }
    }
}

/// Carbon for one step of grid exchange; zero for export.
pub fn import_carbon_g(grid_power_w: f64, ci_gpkwh: f64, dt_s: f64) -> f64 {
    energy_kwh(grid_power_w.max(0.0), dt_s) * ci_gpkwh
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Balance {
    pub grid: GridExchange,
    pub battery_power_w: f64,
    pub battery: Option<BatteryUpdate>,
}

pub fn balance(
    production_w: f64,
    consumption_w: f64,
    battery: Option<(&BatteryState, &BatterySpec)>,
    ci_gpkwh: f64,
    dt_s: f64,
) -> Balance {
    let delta = production_w - consumption_w;
    let update = battery.map(|(state, spec)| battery_update(state, spec, delta + state.grid_charge_w, dt_s));
    let battery_power_w = update.map_or(0.0, |u| u.accepted_power_w);
    let grid_power_w = consumption_w + battery_power_w - production_w;
    Balance {
        grid: GridExchange::new(grid_power_w, ci_gpkwh, dt_s),
        battery_power_w,
        battery: update,
    }
}

/// True when the step had no renewable excess (production <= consumption).
pub fn excess_le_zero(record: &StepRecord) -> bool {
    record.production_w - record.consumption_w <= 0.0
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn battery(soc: f64) -> (BatteryState, BatterySpec) {
        let spec = BatterySpec {
            capacity_kwh: 10.0,
            c_rate: 1.0,
            charge_efficiency: 0.9,
            initial_soc_kwh: soc,
        };
        (BatteryState::initial(&spec), spec)
    }

    #[test]
    fn deficit_at_floor_imports() {
        let (mut st, spec) = battery(2.0);
        st.min_soc_kwh = 2.0;
        let b = balance(300.0, 500.0, Some((&st, &spec)), 400.0, 60.0);
        assert_eq!(b.grid.grid_power_w, 200.0);
        assert_eq!(b.battery_power_w, 0.0);
    }

    #[test]
    fn exact_balance_is_carbon_free() {
        let b = balance(500.0, 500.0, None, 400.0, 60.0);
        assert_eq!(b.grid.grid_power_w, 0.0);
        assert_eq!(b.grid.carbon_g, 0.0);
    }

    #[test]
    fn battery_absorbs_surplus() {
        let (st, spec) = battery(2.0);
        let b = balance(1000.0, 400.0, Some((&st, &spec)), 400.0, 60.0);
        assert_eq!(b.battery_power_w, 600.0);
        assert_eq!(b.grid.grid_power_w, 0.0);
    }

    #[test]
    fn forced_charge_adds_import() {
        let (mut st, spec) = battery(2.0);
        st.grid_charge_w = 500.0;
        // deficit 200 W plus 500 W forced => battery charges 300 W, grid 500 W
        let b = balance(300.0, 500.0, Some((&st, &spec)), 100.0, 60.0);
        assert_eq!(b.battery_power_w, 300.0);
        assert_eq!(b.grid.grid_power_w, 500.0);
        let b = balance(600.0, 500.0, Some((&st, &spec)), 100.0, 60.0);
        assert_eq!(b.grid.grid_power_w, 500.0);
    }

    #[test]
    fn export_has_no_carbon() {
        let b = balance(900.0, 100.0, None, 500.0, 60.0);
        assert_eq!(b.grid.grid_power_w, -800.0);
        assert_eq!(b.grid.carbon_g, 0.0);
    }

    #[test]
    fn carbon_for_one_hour() {
        // 2 kW import for an hour at 300 g/kWh
        assert_eq!(import_carbon_g(2000.0, 300.0, 3600.0), 600.0);
    }

    proptest! {
        #[test]
        fn closes_and_is_monotone(
            prod in 0.0f64..1e5, extra in 0.0f64..1e4, cons in 0.0f64..1e5,
            soc in 0.0f64..=10.0, ci in 0.0f64..1000.0,
        ) {
            let (st, spec) = battery(soc);
            let a = balance(prod, cons, Some((&st, &spec)), ci, 60.0);
            let lhs = prod + a.grid.grid_power_w.max(0.0);
            let rhs = cons + (-a.grid.grid_power_w).max(0.0) + a.battery_power_w;
            prop_assert!((lhs - rhs).abs() <= 1e-9 * lhs.abs().max(rhs.abs()).max(1.0));
            prop_assert!(a.grid.carbon_g >= 0.0);
            let b = balance(prod + extra, cons, Some((&st, &spec)), ci, 60.0);
            prop_assert!(b.grid.carbon_g <= a.grid.carbon_g + 1e-9);

            let plain = balance(prod, cons, None, ci, 60.0);
            prop_assert_eq!(plain.grid.grid_power_w, cons - prod);
        }
    }
}
