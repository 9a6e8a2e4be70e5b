use std::sync::Arc;
use std::time::Duration;

use gridloop::consumers::NodeMeter;
use gridloop::generation::{ProducerKind, TraceProducer};
use gridloop::signals::{ForecastSet, Trace};
use gridloop::sim::CarbonSignal;
use gridloop::storage::{Battery, BatterySpec};
use gridloop::{ControlPlane, Simulation, Subsystem, Timestamp};
use reqwest::StatusCode;
use serde_json::{json, Value};
use tokio::net::TcpListener;

const T0: i64 = 1_700_000_000;

struct Harness {
    sim: Simulation,
    base: String,
    http: reqwest::Client,
}

impl Harness {
    async fn get(&self, path: &str) -> (StatusCode, Value) {
        let r = self.http.get(format!("{}{path}", self.base)).send().await.unwrap();
        let status = r.status();
        (status, r.json().await.unwrap())
    }

    async fn put(&self, path: &str, body: Value) -> (StatusCode, Value) {
        self.put_raw(path, body.to_string()).await
    }

    async fn put_raw(&self, path: &str, body: String) -> (StatusCode, Value) {
        let r = self
            .http
            .put(format!("{}{path}", self.base))
            .header("content-type", "application/json")
            .body(body)
            .send()
            .await
            .unwrap();
        let status = r.status();
        (status, r.json().await.unwrap_or(Value::Null))
    }
}

fn forecast() -> ForecastSet {
    let issue = Timestamp::from_epoch(T0);
    let points = (1..=3).map(|h| (issue + h * 3600, 100.0 * h as f64)).collect();
    ForecastSet::new(vec![(issue, Trace::new(points, Default::default()).unwrap())]).unwrap()
}

async fn harness(with_forecast: bool, push_timeout: Duration) -> Harness {
    let mut sim = Simulation::new(Timestamp::from_epoch(T0), 60).unwrap();
    let mut ci = CarbonSignal::new(Trace::constant(300.0).unwrap());
    if with_forecast {
        ci = ci.with_forecast(forecast());
    }
    sim.register("grid-ci", Subsystem::Signal(ci), 0).unwrap();
    sim.register(
        "pv",
        Subsystem::producer(TraceProducer::new(Trace::constant(400.0).unwrap(), ProducerKind::Solar)),
        0,
    )
    .unwrap();
    sim.register(
        "diesel",
        Subsystem::producer(TraceProducer::new(Trace::constant(50.0).unwrap(), ProducerKind::Other)),
        0,
    )
    .unwrap();
    sim.register("vm", Subsystem::Consumer(NodeMeter::trace("vm", Trace::constant(150.0).unwrap())), 0)
        .unwrap();
    sim.register("pi", Subsystem::Consumer(NodeMeter::push("pi", push_timeout)), 0).unwrap();
    let spec = BatterySpec { capacity_kwh: 10.0, c_rate: 1.0, charge_efficiency: 0.9, initial_soc_kwh: 5.0 };
    sim.register("battery", Subsystem::Storage(Battery::new(spec).unwrap()), 0).unwrap();

    let cp: Arc<ControlPlane> = sim.control_plane();
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(gridloop_api::serve(listener, cp, std::future::pending()));
    Harness { sim, base: format!("http://{addr}/api/v1"), http: reqwest::Client::new() }
}

async fn default_harness() -> Harness {
    harness(true, Duration::from_secs(60)).await
}

#[tokio::test(flavor = "multi_thread")]
async fn reads_before_first_step_are_unavailable() {
    let h = default_harness().await;
    for path in ["/carbon-intensity", "/solar", "/battery", "/nodes/vm/power", "/carbon-intensity?forecast_horizon_s=60"] {
        let (status, body) = h.get(path).await;
        assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE, "{path}");
        assert!(body["error"].is_string());
    }
    // an unknown node is still unknown before the first step
    assert_eq!(h.get("/nodes/nope/power").await.0, StatusCode::NOT_FOUND);
    // polling a cap before the first step reports no cap
    let (status, body) = h.get("/nodes/vm/power-cap").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["cap_w"], Value::Null);
}

#[tokio::test(flavor = "multi_thread")]
async fn committed_values_are_served() {
    let mut h = default_harness().await;
    h.sim.step().unwrap();

    let (status, ci) = h.get("/carbon-intensity").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ci["value_gpkwh"], json!(300.0));
    assert_eq!(ci["sim_time"], json!("2023-11-14T22:13:20Z"));

    let (_, solar) = h.get("/solar").await;
    assert_eq!(solar["power_w"], json!(400.0));
    assert_eq!(solar["production_w"], json!(450.0));

    let (_, node) = h.get("/nodes/vm/power").await;
    assert_eq!(node["power_w"], json!(150.0));
    assert_eq!(node["stale"], json!(false));
    // never pushed
    let (_, pi) = h.get("/nodes/pi/power").await;
    assert_eq!(pi["power_w"], json!(0.0));
    assert_eq!(pi["stale"], json!(true));

    let (_, b1) = h.get("/battery").await;
    for key in ["soc_kwh", "capacity_kwh", "min_soc_kwh", "grid_charge_w", "battery_power_w"] {
        assert!(b1[key].is_number(), "{key} missing from {b1}");
    }
    assert_eq!(b1["capacity_kwh"], json!(10.0));
    // surplus 300 W charged at 0.9 for one minute
    let expected_soc = 5.0 + 300.0 * 60.0 / 3.6e6 * 0.9;
    assert!((b1["soc_kwh"].as_f64().unwrap() - expected_soc).abs() < 1e-12);
    let (_, b2) = h.get("/battery").await;
    assert_eq!(b1, b2);
}

#[tokio::test(flavor = "multi_thread")]
async fn forecast_series() {
    let mut h = default_harness().await;
    h.sim.step().unwrap();
    let (status, body) = h.get("/carbon-intensity?forecast_horizon_s=7200").await;
    assert_eq!(status, StatusCode::OK);
    let series = body["forecast"].as_array().unwrap();
    assert_eq!(series.len(), 2);
    assert_eq!(series[0]["value_gpkwh"], json!(100.0));
    assert_eq!(series[1]["target_time"], json!("2023-11-15T00:13:20Z"));

    let mut h = harness(false, Duration::from_secs(60)).await;
    h.sim.step().unwrap();
    assert_eq!(h.get("/carbon-intensity?forecast_horizon_s=60").await.0, StatusCode::NOT_FOUND);
    assert_eq!(h.get("/carbon-intensity?forecast_horizon_s=abc").await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread")]
async fn battery_writes_commit_last_writer() {
    let mut h = default_harness().await;
    h.sim.step().unwrap();
    let (status, ack) = h.put("/battery", json!({ "min_soc_kwh": 2.0 })).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(ack["effective_at"], json!("2023-11-14T22:14:20Z"));
    h.put("/battery", json!({ "min_soc_kwh": 3.0 })).await;
    assert_eq!(h.get("/battery").await.1["min_soc_kwh"], json!(0.0));
    h.sim.step().unwrap();
    assert_eq!(h.get("/battery").await.1["min_soc_kwh"], json!(3.0));

    for bad in [
        json!({ "min_soc_kwh": 99.0 }),
        json!({ "min_soc_kwh": -1.0 }),
        json!({ "grid_charge_w": -5.0 }),
        json!({}),
        json!({ "min_soc": 1.0 }),
        json!({ "min_soc_kwh": "three" }),
    ] {
        let (status, body) = h.put("/battery", bad.clone()).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{bad}");
        assert!(body["error"].is_string());
    }
    assert_eq!(h.put_raw("/battery", "{not json".into()).await.0, StatusCode::BAD_REQUEST);
    // a rejected combined write leaves nothing queued
    assert_eq!(h.put("/battery", json!({ "min_soc_kwh": 1.0, "grid_charge_w": -1.0 })).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(h.sim.control_plane().pending(), 0);
}

#[tokio::test(flavor = "multi_thread")]
async fn power_cap_visible_only_after_commit() {
    let mut h = default_harness().await;
    h.sim.step().unwrap();
    let (status, _) = h.put("/nodes/vm/power-cap", json!({ "cap_w": 100.0 })).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(h.get("/nodes/vm/power").await.1["power_w"], json!(150.0));
    assert_eq!(h.get("/nodes/vm/power-cap").await.1["cap_w"], Value::Null);
    h.sim.step().unwrap();
    assert_eq!(h.get("/nodes/vm/power").await.1["power_w"], json!(100.0));
    assert_eq!(h.get("/nodes/vm/power-cap").await.1["cap_w"], json!(100.0));

    assert_eq!(h.put("/nodes/vm/power-cap", json!({ "cap_w": null })).await.0, StatusCode::ACCEPTED);
    h.sim.step().unwrap();
    assert_eq!(h.get("/nodes/vm/power").await.1["power_w"], json!(150.0));

    assert_eq!(h.put("/nodes/vm/power-cap", json!({})).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(h.put("/nodes/vm/power-cap", json!({ "cap_w": -1.0 })).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(h.put("/nodes/nope/power-cap", json!({ "cap_w": 1.0 })).await.0, StatusCode::NOT_FOUND);
    assert_eq!(h.get("/nodes/nope/power-cap").await.0, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread")]
async fn push_meter_ingest() {
    let mut h = default_harness().await;
    assert_eq!(h.put("/nodes/pi/power", json!({ "power_w": 80.0 })).await.0, StatusCode::ACCEPTED);
    let r = h.sim.step().unwrap();
    assert_eq!(r.consumption_w, 230.0);
    let (_, pi) = h.get("/nodes/pi/power").await;
    assert_eq!(pi["power_w"], json!(80.0));
    assert_eq!(pi["stale"], json!(false));

    assert_eq!(h.put("/nodes/pi/power", json!({ "power_w": -5.0 })).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(h.put("/nodes/vm/power", json!({ "power_w": 5.0 })).await.0, StatusCode::CONFLICT);
    assert_eq!(h.put("/nodes/nope/power", json!({ "power_w": 5.0 })).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread")]
async fn push_meter_goes_stale() {
    let mut h = harness(true, Duration::from_millis(50)).await;
    h.put("/nodes/pi/power", json!({ "power_w": 80.0 })).await;
    tokio::time::sleep(Duration::from_millis(120)).await;
    h.sim.step().unwrap();
    let (_, pi) = h.get("/nodes/pi/power").await;
    assert_eq!(pi["stale"], json!(true));
    // last value is held
    assert_eq!(pi["power_w"], json!(80.0));
}

#[tokio::test(flavor = "multi_thread")]
async fn unknown_routes() {
    let h = default_harness().await;
    let (status, body) = h.get("/nope").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(body["error"].is_string());
    let r = h.http.post(format!("{}/battery", h.base)).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::METHOD_NOT_ALLOWED);
}

#[test]
fn threaded_server_starts_and_stops() {
    let sim = Simulation::new(Timestamp::from_epoch(T0), 60).unwrap();
    let server = gridloop_api::ApiServer::start("127.0.0.1:0".parse().unwrap(), sim.control_plane()).unwrap();
    assert_ne!(server.local_addr().port(), 0);
    assert!(server.base_url().ends_with("/api/v1"));
    server.shutdown().unwrap();
}
