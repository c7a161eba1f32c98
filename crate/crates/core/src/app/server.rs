//! JSON-over-HTTP decision-support service.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::{json, Value};

use crate::cohort::{
    Hpv, Race, Stage, Subsite, AJCC_RANGE, GRADE_RANGE, LYMPH_NODE_REGIONS, N_STAGE_RANGE,
    SMOKING_RANGE, T_STAGE_RANGE,
};
use crate::error::Error;
use crate::policy::Strategy;
use crate::symptoms::{DEFAULT_SYMPTOM_NAMES, TIMEPOINT_WEEKS};

use super::bundle::ModelBundle;
use super::pipeline::default_patient;
use super::simulate::{handle_simulate, SimulationRequest, RESPONSE_SCHEMA_VERSION};

pub const API_SCHEMA_VERSION: u32 = 1;

#[derive(Clone)]
pub struct AppState {
    pub bundle: Option<Arc<ModelBundle>>,
    pub digest: Option<String>,
    seeds: Arc<AtomicU64>,
}

impl AppState {
    pub fn new(bundle: Option<(ModelBundle, String)>) -> Self {
        let (bundle, digest) = match bundle {
            Some((b, d)) => (Some(Arc::new(b)), Some(d)),
            None => (None, None),
        };
        AppState {
            bundle,
            digest,
            seeds: Arc::new(AtomicU64::new(1)),
        }
    }
}

fn error_json(kind: &str, body: Value) -> Value {
    let mut b = json!({ "error": kind });
    if let (Value::Object(dst), Value::Object(src)) = (&mut b, body) {
        dst.extend(src);
    }
    b
}

fn error_response(status: StatusCode, kind: &str, body: Value) -> Response {
    (status, Json(error_json(kind, body))).into_response()
}

/// HTTP status and JSON error body for a handler error.
pub fn error_body(e: &Error) -> (u16, Value) {
    match e {
        Error::Validation(problems) => (
            422,
            error_json("validation", json!({ "problems": problems })),
        ),
        Error::Config(m) | Error::Usage(m) | Error::Domain(m) => (
            422,
            error_json("invalid_request", json!({ "message": m })),
        ),
        other => (500, error_json("internal", json!({ "message": other.to_string() }))),
    }
}

pub fn error_to_response(e: Error) -> Response {
    let (status, body) = error_body(&e);
    let status = StatusCode::from_u16(status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    (status, Json(body)).into_response()
}

async fn simulate(State(state): State<AppState>, body: Bytes) -> Response {
    let Some(bundle) = state.bundle.clone() else {
        return error_response(
            StatusCode::SERVICE_UNAVAILABLE,
            "no_bundle",
            json!({ "message": "no model bundle is loaded" }),
        );
    };
    let req: SimulationRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => {
            return error_response(
                StatusCode::BAD_REQUEST,
                "bad_request",
                json!({ "message": e.to_string() }),
            )
        }
    };
    let fallback = state.seeds.fetch_add(1, Ordering::Relaxed);
    let result =
        tokio::task::spawn_blocking(move || handle_simulate(&req, &bundle, fallback)).await;
    match result {
        Ok(Ok(resp)) => Json(resp).into_response(),
        Ok(Err(e)) => error_to_response(e),
        Err(e) => error_response(
            StatusCode::INTERNAL_SERVER_ERROR,
            "internal",
            json!({ "message": e.to_string() }),
        ),
    }
}

/// Input-form metadata for clients.
pub fn schema_json() -> Value {
    let range = |(lo, hi): (u8, u8)| json!({ "min": lo, "max": hi });
    json!({
        "schema_version": API_SCHEMA_VERSION,
        "response_schema_version": RESPONSE_SCHEMA_VERSION,
        "features": [
            { "name": "age", "kind": "number", "min": 0, "max": 120, "unit": "years" },
            { "name": "is_male", "kind": "boolean" },
            { "name": "race", "kind": "categorical", "options": Race::ALL },
            { "name": "hpv", "kind": "categorical", "options": Hpv::ALL },
            { "name": "smoking_status", "kind": "ordinal", "range": range(SMOKING_RANGE),
              "labels": ["never", "former", "current"] },
            { "name": "pack_years", "kind": "number", "min": 0 },
            { "name": "lymph_node_regions", "kind": "flags", "count": LYMPH_NODE_REGIONS },
            { "name": "t_stage", "kind": "ordinal", "range": range(T_STAGE_RANGE) },
            { "name": "n_stage", "kind": "ordinal", "range": range(N_STAGE_RANGE) },
            { "name": "ajcc_stage", "kind": "ordinal", "range": range(AJCC_RANGE) },
            { "name": "pathological_grade", "kind": "ordinal", "range": range(GRADE_RANGE) },
            { "name": "subsite", "kind": "categorical", "options": Subsite::ALL },
            { "name": "bilateral", "kind": "boolean" },
            { "name": "total_dose", "kind": "number", "min": 0, "unit": "Gy" },
            { "name": "dose_fraction", "kind": "number", "min": 0, "unit": "Gy/fraction" },
            { "name": "aspiration_pre", "kind": "boolean" }
        ],
        "decisions": Stage::ALL,
        "strategies": Strategy::ALL,
        "default_patient": default_patient(),
        "symptoms": { "names": DEFAULT_SYMPTOM_NAMES, "weeks": TIMEPOINT_WEEKS },
        "request_example": SimulationRequest::new(default_patient(), Stage::Cc, Strategy::Imitation),
    })
}

async fn schema() -> Json<Value> {
    Json(schema_json())
}

async fn health(State(state): State<AppState>) -> Json<Value> {
    Json(json!({
        "status": "ok",
        "bundle_loaded": state.bundle.is_some(),
        "version": env!("CARGO_PKG_VERSION"),
    }))
}

pub const LIMITATIONS: &str = "Models are trained on the cohort recorded in this bundle. \
Predictions describe associations in that cohort and are not causal guarantees. \
The optimal policy reflects the simulator and the objective weights in the config snapshot. \
Symptom trajectories come from a separate patient-reported-outcomes cohort. \
Patients with a novelty percentile above 75 are poorly represented by the training data.";

async fn model_info(State(state): State<AppState>) -> Response {
    let Some(b) = state.bundle.as_ref() else {
        return error_response(
            StatusCode::SERVICE_UNAVAILABLE,
            "no_bundle",
            json!({ "message": "no model bundle is loaded" }),
        );
    };
    Json(json!({
        "digest": state.digest,
        "provenance": b.info,
        "config": b.config,
        "policy_training": b.policy_report,
        "limitations": LIMITATIONS,
    }))
    .into_response()
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/simulate", post(simulate))
        .route("/api/schema", get(schema))
        .route("/api/health", get(health))
        .route("/api/model-info", get(model_info))
        .with_state(state)
}

pub async fn serve(state: AppState, port: u16) -> crate::Result<()> {
    let addr = std::net::SocketAddr::from(([0, 0, 0, 0], port));
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::io(format!("0.0.0.0:{port}"), e))?;
    log::info!("listening on {addr}");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Error::io("server", e))
}
