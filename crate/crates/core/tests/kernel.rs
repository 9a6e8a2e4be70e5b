use gridloop::consumers::NodeMeter;
use gridloop::generation::{ProducerKind, TraceProducer};
use gridloop::runlog::write_csv;
use gridloop::signals::{load_trace, Column, Interpolation, Trace, TraceOptions};
use gridloop::sim::CarbonSignal;
use gridloop::storage::{Battery, BatterySpec};
use gridloop::{ExecutionMode, Simulation, StepRecord, Subsystem, Timestamp};

const T0: i64 = 1_717_200_000;

fn constant(w: f64) -> Trace {
    Trace::constant(w).unwrap()
}

fn producer(trace: Trace) -> Subsystem {
    Subsystem::producer(TraceProducer::new(trace, ProducerKind::Other))
}

fn spec(initial_soc_kwh: f64) -> BatterySpec {
    BatterySpec { capacity_kwh: 10.0, c_rate: 1.0, charge_efficiency: 0.9, initial_soc_kwh }
}

fn microgrid(prod_w: f64, cons_w: f64, soc: f64) -> Simulation {
    let mut sim = Simulation::new(Timestamp::from_epoch(T0), 60).unwrap();
    sim.register("ci", Subsystem::Signal(CarbonSignal::new(constant(300.0))), 0).unwrap();
    sim.register("pv", producer(constant(prod_w)), 0).unwrap();
    sim.register("n", Subsystem::Consumer(NodeMeter::trace("n", constant(cons_w))), 0).unwrap();
    sim.register("bat", Subsystem::Storage(Battery::new(spec(soc)).unwrap()), 0).unwrap();
    sim
}

#[test]
fn forced_charge_imports_until_full() {
    for (prod, cons) in [(300.0, 500.0), (800.0, 500.0), (0.0, 0.0)] {
        let mut sim = microgrid(prod, cons, 9.9);
        sim.control_plane().set_battery_policy(None, Some(500.0)).unwrap();
        let mut filled = false;
        for _ in 0..120 {
            let r = sim.step().unwrap();
            if r.battery_soc_kwh < 10.0 {
                assert!(r.grid_power_w >= 500.0 - 1e-9, "{r:?}");
            } else {
                filled = true;
            }
        }
        assert!(filled);
        // once full, only the deficit is imported
        let r = sim.step().unwrap();
        assert_eq!(r.battery_power_w, 0.0);
        assert_eq!(r.grid_power_w, cons - prod);
    }
}

#[test]
fn min_soc_floor_stops_discharge() {
    let mut sim = microgrid(0.0, 2000.0, 5.0);
    sim.control_plane().set_battery_policy(Some(3.0), None).unwrap();
    let records: Vec<StepRecord> = (0..120).map(|_| sim.step().unwrap()).collect();
    let last = records.last().unwrap();
    assert_eq!(last.battery_soc_kwh, 3.0);
    assert_eq!(last.battery_power_w, 0.0);
    assert_eq!(last.grid_power_w, 2000.0);
    assert!(records.iter().all(|r| r.battery_soc_kwh >= 3.0));
}

#[test]
fn floor_above_soc_is_not_a_target() {
    let mut sim = microgrid(0.0, 500.0, 2.0);
    sim.control_plane().set_battery_policy(Some(6.0), None).unwrap();
    for _ in 0..10 {
        let r = sim.step().unwrap();
        assert_eq!(r.battery_soc_kwh, 2.0);
        assert_eq!(r.battery_power_w, 0.0);
        assert_eq!(r.grid_power_w, 500.0);
    }
}

#[test]
fn step_carbon_matches_rule() {
    let mut sim = microgrid(100.0, 900.0, 0.0);
    let r = sim.step().unwrap();
    let expected = r.grid_power_w.max(0.0) * 60.0 / 3600.0 / 1000.0 * 300.0;
    assert!((r.step_carbon_g - expected).abs() <= 1e-9 * expected);
}

fn day_night(start: Timestamp) -> Trace {
    let points = (0..=48).map(|h| (start + h * 3600, if (h % 24) >= 7 && (h % 24) < 19 { 900.0 } else { 0.0 })).collect();
    Trace::new(points, Interpolation::Linear).unwrap()
}

fn scenario() -> Simulation {
    let start = Timestamp::from_epoch(T0);
    let mut sim = Simulation::new(start, 60).unwrap();
    sim.register("ci", Subsystem::Signal(CarbonSignal::new(constant(280.0))), 0).unwrap();
    sim.register("pv", producer(day_night(start)), 0).unwrap();
    sim.register("n", Subsystem::Consumer(NodeMeter::trace("n", constant(350.0))), 0).unwrap();
    sim.register("bat", Subsystem::Storage(Battery::new(spec(2.0)).unwrap()), 0).unwrap();
    sim
}

#[test]
fn deadline_misses_only_set_the_flag() {
    let mut fast = scenario();
    fast.run(120 * 60, &ExecutionMode::Fast).unwrap();
    // a slot of 60 ns per simulated minute cannot be met
    let mut rushed = scenario();
    let report = rushed.run(120 * 60, &ExecutionMode::Paced { factor: 1e9 }).unwrap();
    assert!(report.summary.deadlines_missed > 0);
    for (a, b) in fast.records().iter().zip(rushed.records()) {
        assert_eq!(StepRecord { deadline_missed: false, ..b.clone() }, *a);
    }
    assert_eq!(report.summary.deadlines_missed as usize, rushed.records().iter().filter(|r| r.deadline_missed).count());
}

#[test]
fn clock_is_monotone_with_one_record_per_step() {
    let mut sim = scenario();
    sim.run(86_400, &ExecutionMode::Fast).unwrap();
    sim.run(3_600, &ExecutionMode::Fast).unwrap();
    let records = sim.records();
    assert_eq!(records.len(), 1440 + 60);
    assert_eq!(records[0].time, Timestamp::from_epoch(T0));
    assert!(records.windows(2).all(|w| w[1].time - w[0].time == 60));
    assert_eq!(sim.clock().now_s(), 90_000);
    assert_eq!(sim.summary().steps_executed, 1500);
}

#[test]
fn run_log_reloads_as_traces() {
    let mut sim = scenario();
    sim.run(86_400, &ExecutionMode::Fast).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.csv");
    write_csv(&path, sim.records()).unwrap();
    for (i, col) in ["production_w", "consumption_w", "battery_power_w", "battery_soc_kwh", "grid_power_w"].iter().enumerate() {
        let opts = TraceOptions { value_column: Column::Name(col.to_string()), ..Default::default() };
        let trace = load_trace(&path, &opts).unwrap();
        assert_eq!(trace.len(), 1440);
        for (r, (t, v)) in sim.records().iter().zip(trace.points()) {
            assert_eq!(r.time, t);
            let expected = [r.production_w, r.consumption_w, r.battery_power_w, r.battery_soc_kwh, r.grid_power_w][i];
            assert_eq!(v, expected, "{col} at {t}");
        }
    }
}
