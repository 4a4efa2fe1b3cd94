//! JSON API over a fitted model.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use artmix::predict::{predict_scenario, FittedModel, Scenario};
use artmix::regimen::DrugClass;
use artmix::Error;
use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

pub const DEFAULT_LEVEL: f64 = 0.95;
pub const DEFAULT_SEED: u64 = 1;

/// Body of `POST /api/predict`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictRequest {
    pub scenario: Scenario,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_level() -> f64 {
    DEFAULT_LEVEL
}

fn default_seed() -> u64 {
    DEFAULT_SEED
}

struct AppState {
    model: FittedModel,
    meta: Vec<u8>,
    regimens: Vec<u8>,
}

fn meta_json(model: &FittedModel) -> serde_json::Value {
    let s = &model.schema;
    json!({
        "q": model.q(),
        "s": model.s(),
        "items": s.item_names,
        "covariates": s.covariate_names,
        "kernel": s.kernel,
        "baseline": model.chain.config.baseline_mode,
        "n_draws": model.chain.draws.len(),
        "individual_ids": s.individual_ids,
        "dictionary": model.dictionary.entries(),
        "representatives": model
            .basis
            .representatives
            .regimens
            .iter()
            .map(|r| r.to_string())
            .collect::<Vec<_>>(),
        "d_star": model.basis.pca.d_star,
        "default_level": DEFAULT_LEVEL,
    })
}

fn regimens_json(model: &FittedModel) -> serde_json::Value {
    let classes: Vec<_> = DrugClass::ALL
        .iter()
        .map(|&c| {
            json!({
                "class": c,
                "drugs": model.dictionary.codes_in_class(c),
            })
        })
        .filter(|v| v["drugs"].as_array().is_some_and(|a| !a.is_empty()))
        .collect();
    json!({
        "drugs": model.dictionary.entries(),
        "classes": classes,
    })
}

fn json_bytes(status: StatusCode, body: Vec<u8>) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

fn error_response(status: StatusCode, value: serde_json::Value) -> Response {
    json_bytes(
        status,
        serde_json::to_vec(&value).expect("json value serializes"),
    )
}

/// Maps a prediction failure onto the API's status codes.
fn prediction_error(e: Error) -> Response {
    match e {
        Error::UnknownDrug(code) => error_response(
            StatusCode::UNPROCESSABLE_ENTITY,
            json!({ "error": format!("unknown drug code `{code}`"), "code": code }),
        ),
        Error::UnknownIndividual(_)
        | Error::DimensionMismatch { .. }
        | Error::InvalidConfig(_)
        | Error::InvalidData(_)
        | Error::EmptyRegimen
        | Error::DuplicateDrug(_)
        | Error::Parse(_) => {
            error_response(StatusCode::BAD_REQUEST, json!({ "error": e.to_string() }))
        }
        other => error_response(
            StatusCode::INTERNAL_SERVER_ERROR,
            json!({ "error": other.to_string() }),
        ),
    }
}

async fn meta(State(state): State<Arc<AppState>>) -> Response {
    json_bytes(StatusCode::OK, state.meta.clone())
}

async fn regimens(State(state): State<Arc<AppState>>) -> Response {
    json_bytes(StatusCode::OK, state.regimens.clone())
}

async fn predict(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let req: PredictRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => {
            return error_response(
                StatusCode::BAD_REQUEST,
                json!({ "error": format!("malformed request: {e}") }),
            )
        }
    };
    let result = tokio::task::spawn_blocking(move || {
        let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
        predict_scenario(&state.model, &req.scenario, req.level, &mut rng)
    })
    .await;
    match result {
        Ok(Ok(p)) => json_bytes(
            StatusCode::OK,
            serde_json::to_vec(&p).expect("prediction serializes"),
        ),
        Ok(Err(e)) => prediction_error(e),
        Err(e) => error_response(
            StatusCode::INTERNAL_SERVER_ERROR,
            json!({ "error": e.to_string() }),
        ),
    }
}

/// Routes for `model`; files under `static_dir` are served for every other
/// path when given.
pub fn router(model: FittedModel, static_dir: Option<PathBuf>) -> Router {
    let state = Arc::new(AppState {
        meta: serde_json::to_vec(&meta_json(&model)).expect("meta serializes"),
        regimens: serde_json::to_vec(&regimens_json(&model)).expect("regimens serialize"),
        model,
    });
    let api = Router::new()
        .route("/api/meta", get(meta))
        .route("/api/regimens", get(regimens))
        .route("/api/predict", post(predict))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

pub async fn serve(
    model: FittedModel,
    addr: SocketAddr,
    static_dir: Option<PathBuf>,
) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(model, static_dir))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
