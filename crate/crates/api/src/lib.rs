//! HTTP control plane for a running simulation.
//!
//! Reads are served from the last committed step; writes are validated,
//! queued on the [`ControlPlane`] and applied by the kernel at the next step
//! boundary. Handlers never touch kernel state directly, so request volume
//! cannot slow stepping down.

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use gridloop::control::{BatterySnapshot, ControlError, ControlPlane, PublishedState};
use gridloop::generation::ProducerKind;
use gridloop::Timestamp;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::net::TcpListener;
use tokio::sync::oneshot;

pub const API_PREFIX: &str = "/api/v1";

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        ApiError { status: StatusCode::BAD_REQUEST, message: message.into() }
    }

    fn not_found(what: impl std::fmt::Display) -> Self {
        ApiError { status: StatusCode::NOT_FOUND, message: format!("{what} not found") }
    }
}

impl From<ControlError> for ApiError {
    fn from(e: ControlError) -> Self {
        let status = match &e {
            ControlError::Validation(_) => StatusCode::BAD_REQUEST,
            ControlError::NotFound(_) | ControlError::NoForecast(_) => StatusCode::NOT_FOUND,
            ControlError::NotPushMeter(_) => StatusCode::CONFLICT,
            ControlError::Unavailable => StatusCode::SERVICE_UNAVAILABLE,
        };
        ApiError { status, message: e.to_string() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn committed(cp: &ControlPlane) -> ApiResult<Arc<PublishedState>> {
    cp.snapshot().ok_or(ApiError::from(ControlError::Unavailable))
}

/// Parses a JSON body ourselves so malformed input maps to 400 with the
/// same error shape as every other failure.
fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

#[derive(Serialize)]
struct Accepted {
    effective_at: Timestamp,
}

fn accepted(effective_at: Timestamp) -> Response {
    (StatusCode::ACCEPTED, Json(Accepted { effective_at })).into_response()
}

#[derive(Deserialize)]
struct CarbonQuery {
    forecast_horizon_s: Option<u64>,
}

#[derive(Serialize)]
struct ForecastPoint {
    target_time: Timestamp,
    value_gpkwh: f64,
}

async fn carbon_intensity(
    State(cp): State<Arc<ControlPlane>>,
    q: Result<Query<CarbonQuery>, QueryRejection>,
) -> ApiResult<Json<Value>> {
    let Query(q) = q.map_err(|e| ApiError::bad_request(e.body_text()))?;
    match q.forecast_horizon_s {
        None => {
            let s = committed(&cp)?;
            Ok(Json(json!({
                "sim_time": s.sim_time,
                "step_committed_at": s.step_committed_at,
                "value_gpkwh": s.record.carbon_intensity_gpkwh,
            })))
        }
        Some(horizon) => {
            let (sim_time, window) = cp.forecast(horizon)?;
            let forecast: Vec<ForecastPoint> = window
                .points
                .iter()
                .map(|&(target_time, value_gpkwh)| ForecastPoint { target_time, value_gpkwh })
                .collect();
            Ok(Json(json!({
                "sim_time": sim_time,
                "issue_time": window.issue_time,
                "forecast_horizon_s": horizon,
                "forecast": forecast,
            })))
        }
    }
}

async fn solar(State(cp): State<Arc<ControlPlane>>) -> ApiResult<Json<Value>> {
    let s = committed(&cp)?;
    let panels: Vec<_> = s.producers.iter().filter(|p| p.kind == ProducerKind::Solar).collect();
    let power_w: f64 = panels.iter().map(|p| p.power_w).sum();
    Ok(Json(json!({
        "sim_time": s.sim_time,
        "step_committed_at": s.step_committed_at,
        "power_w": power_w,
        "production_w": s.record.production_w,
        "producers": panels,
    })))
}

#[derive(Serialize)]
struct BatteryBody<'a> {
    sim_time: Timestamp,
    step_committed_at: chrono::DateTime<chrono::Utc>,
    #[serde(flatten)]
    battery: &'a BatterySnapshot,
}

async fn get_battery(State(cp): State<Arc<ControlPlane>>) -> ApiResult<Response> {
    if cp.battery_spec().is_none() {
        return Err(ApiError::not_found("battery"));
    }
    let s = committed(&cp)?;
    let battery = s.battery.as_ref().ok_or_else(|| ApiError::not_found("battery"))?;
    Ok(Json(BatteryBody { sim_time: s.sim_time, step_committed_at: s.step_committed_at, battery }).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BatteryPolicy {
    min_soc_kwh: Option<f64>,
    grid_charge_w: Option<f64>,
}

async fn put_battery(State(cp): State<Arc<ControlPlane>>, body: Bytes) -> ApiResult<Response> {
    let p: BatteryPolicy = parse_body(&body)?;
    Ok(accepted(cp.set_battery_policy(p.min_soc_kwh, p.grid_charge_w)?))
}

async fn node_power(State(cp): State<Arc<ControlPlane>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    if !cp.has_node(&id) {
        return Err(ApiError::not_found(format_args!("node `{id}`")));
    }
    let s = committed(&cp)?;
    let n = s.node(&id).ok_or_else(|| ApiError::not_found(format_args!("node `{id}`")))?;
    Ok(Json(json!({
        "sim_time": s.sim_time,
        "step_committed_at": s.step_committed_at,
        "node_id": n.node_id,
        "power_w": n.power_w,
        "stale": n.stale,
        "cap_w": n.cap_w,
    })))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PushBody {
    power_w: f64,
}

async fn push_power(
    State(cp): State<Arc<ControlPlane>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    if !cp.has_node(&id) {
        return Err(ApiError::not_found(format_args!("node `{id}`")));
    }
    let b: PushBody = parse_body(&body)?;
    cp.push_node_power(&id, b.power_w)?;
    Ok((StatusCode::ACCEPTED, Json(json!({ "node_id": id, "power_w": b.power_w }))).into_response())
}

async fn get_power_cap(State(cp): State<Arc<ControlPlane>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let cap = cp.power_cap(&id)?;
    let sim_time = cp.snapshot().map(|s| s.sim_time);
    Ok(Json(json!({ "node_id": id, "cap_w": cap, "sim_time": sim_time })))
}

async fn put_power_cap(
    State(cp): State<Arc<ControlPlane>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    if !cp.has_node(&id) {
        return Err(ApiError::not_found(format_args!("node `{id}`")));
    }
    // `{"cap_w": null}` clears the cap, so presence has to be checked
    // separately from the value.
    let v: Value = parse_body(&body)?;
    let obj = v.as_object().ok_or_else(|| ApiError::bad_request("expected a JSON object"))?;
    if let Some(k) = obj.keys().find(|k| *k != "cap_w") {
        return Err(ApiError::bad_request(format!("unknown field `{k}`")));
    }
    let cap = match obj.get("cap_w") {
        None => return Err(ApiError::bad_request("missing field `cap_w`")),
        Some(Value::Null) => None,
        Some(v) => Some(v.as_f64().ok_or_else(|| ApiError::bad_request("cap_w must be a number or null"))?),
    };
    Ok(accepted(cp.set_power_cap(&id, cap)?))
}

async fn fallback() -> ApiError {
    ApiError { status: StatusCode::NOT_FOUND, message: "no such endpoint".into() }
}

pub fn router(cp: Arc<ControlPlane>) -> Router {
    let v1 = Router::new()
        .route("/carbon-intensity", get(carbon_intensity))
        .route("/solar", get(solar))
        .route("/battery", get(get_battery).put(put_battery))
        .route("/nodes/{id}/power", get(node_power).put(push_power))
        .route("/nodes/{id}/power-cap", get(get_power_cap).put(put_power_cap));
    Router::new().nest(API_PREFIX, v1).fallback(fallback).with_state(cp)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    cp: Arc<ControlPlane>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(cp)).with_graceful_shutdown(shutdown).await
}

/// A server running on its own thread and runtime, for callers that drive
/// the kernel synchronously.
pub struct ApiServer {
    addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<std::io::Result<()>>>,
}

impl ApiServer {
    pub fn start(addr: SocketAddr, cp: Arc<ControlPlane>) -> std::io::Result<Self> {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(4)
            .enable_all()
            .thread_name("gridloop-api")
            .build()?;
        let listener = rt.block_on(TcpListener::bind(addr))?;
        let addr = listener.local_addr()?;
        let (stop, stopped) = oneshot::channel::<()>();
        let thread = std::thread::Builder::new().name("gridloop-api".into()).spawn(move || {
            rt.block_on(serve(listener, cp, async {
                let _ = stopped.await;
            }))
        })?;
        tracing::info!(%addr, "api listening");
        Ok(ApiServer { addr, stop: Some(stop), thread: Some(thread) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}{}", self.addr, API_PREFIX)
    }

    pub fn shutdown(mut self) -> std::io::Result<()> {
        self.stop_and_join()
    }

    fn stop_and_join(&mut self) -> std::io::Result<()> {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(std::io::Error::other("api thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for ApiServer {
    fn drop(&mut self) {
        let _ = self.stop_and_join();
    }
}
