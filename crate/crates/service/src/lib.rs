//! HTTP inference over a frozen autoencoder and cascade.
//!
//! Endpoints: `POST /encode`, `POST /decode`, `POST /sample_intrinsics`, `POST /sample`,
//! `POST /interpolate`, `GET /health`, `GET /model-info` and a static page at `/`.

mod error;
mod json;

pub use error::ApiError;
pub use json::parse_lenient;

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use jade_core::autoencoder::AEConfig;
use jade_core::diffusion::DenoiserConfig;
use jade_core::latent::{interpolate, Component, LatentPair};
use jade_core::numerics::Tensor;
use jade_core::pipeline::{pelvis_normalize_cloud, Models};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

/// Upper bound on `/sample` counts per request.
pub const MAX_SAMPLE_COUNT: usize = 256;

const INDEX_HTML: &str = include_str!("index.html");

/// Configuration snapshot reported by `/model-info`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub n_points: usize,
    pub joints: usize,
    pub d_h: usize,
    pub diffusion_steps: usize,
    pub autoencoder: AEConfig,
    pub extrinsic: DenoiserConfig,
    pub intrinsic: DenoiserConfig,
}

impl ModelInfo {
    pub fn of(models: &Models) -> Self {
        let ae = &models.ae.config;
        Self {
            n_points: ae.n_points,
            joints: ae.joints,
            d_h: ae.d_h,
            diffusion_steps: models.schedule.steps(),
            autoencoder: ae.clone(),
            extrinsic: models.extrinsic.config.clone(),
            intrinsic: models.intrinsic.config.clone(),
        }
    }
}

struct Loaded {
    models: Models,
    info: ModelInfo,
}

/// Shared service state. Models are installed once and never change afterwards.
#[derive(Clone, Default)]
pub struct ServiceState {
    loaded: Arc<OnceLock<Loaded>>,
    requests: Arc<AtomicU64>,
}

impl ServiceState {
    /// A state whose model endpoints answer 503 until [`ServiceState::install`] runs.
    pub fn loading() -> Self {
        Self::default()
    }

    pub fn ready(models: Models) -> Self {
        let state = Self::loading();
        state.install(models).unwrap_or_else(|_| unreachable!("fresh state"));
        state
    }

    /// Installs the models; fails (returning them) if models were already installed.
    pub fn install(&self, models: Models) -> Result<(), Box<Models>> {
        let info = ModelInfo::of(&models);
        self.loaded.set(Loaded { models, info }).map_err(|l| Box::new(l.models))
    }

    pub fn is_ready(&self) -> bool {
        self.loaded.get().is_some()
    }

    /// Number of requests received so far.
    pub fn request_count(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }

    fn models(&self) -> Result<&Loaded, ApiError> {
        self.loaded.get().ok_or(ApiError::NotReady)
    }
}

pub fn router(state: ServiceState) -> Router {
    Router::new()
        .route("/", get(index))
        .route("/health", get(health))
        .route("/model-info", get(model_info))
        .route("/encode", post(encode))
        .route("/decode", post(decode))
        .route("/sample_intrinsics", post(sample_intrinsics))
        .route("/sample", post(sample))
        .route("/interpolate", post(interpolate_latents))
        .with_state(state)
}

/// Serves `router(state)` on `addr` until the process is stopped.
pub async fn serve(addr: SocketAddr, state: ServiceState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

type ApiResult = Result<Response, ApiError>;

fn count_request(state: &ServiceState) -> u64 {
    state.requests.fetch_add(1, Ordering::Relaxed) + 1
}

fn with_request_id(id: u64, mut response: Response) -> Response {
    if let Ok(v) = HeaderValue::from_str(&id.to_string()) {
        response.headers_mut().insert("x-request-id", v);
    }
    response
}

async fn blocking<F>(state: ServiceState, f: F) -> Response
where
    F: FnOnce(&Loaded) -> ApiResult + Send + 'static,
{
    let id = count_request(&state);
    let result = match state.models() {
        Err(e) => Err(e),
        Ok(_) => tokio::task::spawn_blocking(move || f(state.models()?))
            .await
            .unwrap_or_else(|e| Err(ApiError::Internal(e.to_string()))),
    };
    with_request_id(id, result.unwrap_or_else(IntoResponse::into_response))
}

async fn index() -> impl IntoResponse {
    ([(header::CACHE_CONTROL, "no-store")], Html(INDEX_HTML))
}

async fn health(State(state): State<ServiceState>) -> Response {
    count_request(&state);
    if state.is_ready() {
        Json(json!({ "status": "ok" })).into_response()
    } else {
        (StatusCode::SERVICE_UNAVAILABLE, Json(json!({ "status": "loading" }))).into_response()
    }
}

async fn model_info(State(state): State<ServiceState>) -> Response {
    count_request(&state);
    match state.models() {
        Ok(l) => Json(&l.info).into_response(),
        Err(e) => e.into_response(),
    }
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError::Internal(e.to_string())
}

fn object(body: &Bytes) -> Result<serde_json::Map<String, Value>, ApiError> {
    match parse_lenient(body)? {
        Value::Object(m) => Ok(m),
        _ => Err(ApiError::BadRequest("body must be a JSON object".into())),
    }
}

fn field<'a>(obj: &'a serde_json::Map<String, Value>, key: &str) -> Result<&'a Value, ApiError> {
    obj.get(key).ok_or_else(|| ApiError::BadRequest(format!("missing field `{key}`")))
}

/// `[[x, y, z], ...]` where `null` stands for a non-finite coordinate.
fn rows(value: &Value, width: usize, what: &'static str) -> Result<Vec<Vec<f32>>, ApiError> {
    let shape_err = || ApiError::Shape(format!("{what} must be an array of {width}-element arrays"));
    let arr = value.as_array().ok_or_else(shape_err)?;
    let mut out = Vec::with_capacity(arr.len());
    let mut finite = true;
    for row in arr {
        let row = row.as_array().filter(|r| r.len() == width).ok_or_else(shape_err)?;
        let mut vals = Vec::with_capacity(width);
        for v in row {
            let x = match v {
                Value::Null => f32::NAN,
                Value::Number(n) => n.as_f64().map(|f| f as f32).unwrap_or(f32::NAN),
                _ => return Err(shape_err()),
            };
            finite &= x.is_finite();
            vals.push(x);
        }
        out.push(vals);
    }
    if !finite {
        return Err(ApiError::NonFinite(what));
    }
    Ok(out)
}

fn tensor(rows: Vec<Vec<f32>>, width: usize) -> Tensor<f32> {
    let n = rows.len();
    Tensor::new(&[n, width], rows.into_iter().flatten().collect()).expect("rows have equal width")
}

fn extrinsics(value: &Value, info: &ModelInfo) -> Result<Tensor<f32>, ApiError> {
    let e = rows(value, 3, "e")?;
    if e.len() != info.joints {
        return Err(ApiError::Shape(format!("e has {} joints, model has {}", e.len(), info.joints)));
    }
    Ok(tensor(e, 3))
}

fn latents(value: &Value, info: &ModelInfo) -> Result<LatentPair, ApiError> {
    let obj = value.as_object().ok_or_else(|| ApiError::BadRequest("latents must be an object".into()))?;
    let e = extrinsics(field(obj, "e")?, info)?;
    let h = rows(field(obj, "h")?, info.d_h, "h")?;
    if h.len() != info.joints {
        return Err(ApiError::Shape(format!("h has {} joints, model has {}", h.len(), info.joints)));
    }
    LatentPair::new(e, tensor(h, info.d_h)).map_err(|e| ApiError::Shape(e.to_string()))
}

fn seed(obj: &serde_json::Map<String, Value>) -> Result<u64, ApiError> {
    field(obj, "seed")?.as_u64().ok_or(ApiError::Seed)
}

fn mesh_json(points: &[[f32; 3]]) -> Value {
    json!({ "mesh": { "vertices": points } })
}

async fn encode(State(state): State<ServiceState>, body: Bytes) -> Response {
    blocking(state, move |l| {
        let obj = object(&body)?;
        let mesh = field(&obj, "mesh")?
            .as_object()
            .ok_or_else(|| ApiError::BadRequest("mesh must be an object".into()))?;
        let vertices = field(mesh, "vertices")?;
        let count = vertices.as_array().map(Vec::len).ok_or_else(|| ApiError::BadRequest("vertices must be an array".into()))?;
        if count != l.info.n_points {
            return Err(ApiError::VertexCount { expected: l.info.n_points, got: count });
        }
        let points: Vec<[f32; 3]> = rows(vertices, 3, "vertices")?.into_iter().map(|r| [r[0], r[1], r[2]]).collect();
        let (moved, pelvis) = pelvis_normalize_cloud(&l.models.ae, &points).map_err(internal)?;
        let latent = l.models.ae.encode_cloud(&moved).map_err(internal)?;
        Ok(Json(json!({ "latents": latent, "pelvis": pelvis })).into_response())
    })
    .await
}

async fn decode(State(state): State<ServiceState>, body: Bytes) -> Response {
    blocking(state, move |l| {
        let obj = object(&body)?;
        let latent = latents(field(&obj, "latents")?, &l.info)?;
        let points = l.models.ae.decode_latent(&latent).map_err(internal)?;
        Ok(Json(mesh_json(&points)).into_response())
    })
    .await
}

async fn sample_intrinsics(State(state): State<ServiceState>, body: Bytes) -> Response {
    blocking(state, move |l| {
        let obj = object(&body)?;
        let seed = seed(&obj)?;
        let e = extrinsics(field(&obj, "e")?, &l.info)?;
        let h = l.models.sample_intrinsics(std::slice::from_ref(&e), seed).map_err(internal)?.remove(0);
        let latent = LatentPair::new(e, h).map_err(internal)?;
        Ok(Json(json!({ "latents": latent })).into_response())
    })
    .await
}

async fn sample(State(state): State<ServiceState>, body: Bytes) -> Response {
    blocking(state, move |l| {
        let obj = object(&body)?;
        let seed = seed(&obj)?;
        let count = field(&obj, "count")?
            .as_u64()
            .ok_or_else(|| ApiError::BadRequest("count must be a positive integer".into()))?;
        if count == 0 || count > MAX_SAMPLE_COUNT as u64 {
            return Err(ApiError::Count { max: MAX_SAMPLE_COUNT, got: count });
        }
        let bodies = l.models.sample(count as usize, seed).map_err(internal)?;
        let list: Vec<&LatentPair> = bodies.iter().map(|b| &b.latent).collect();
        Ok(Json(json!({ "latents": list })).into_response())
    })
    .await
}

async fn interpolate_latents(State(state): State<ServiceState>, body: Bytes) -> Response {
    blocking(state, move |l| {
        let obj = object(&body)?;
        let alpha = field(&obj, "alpha")?
            .as_f64()
            .ok_or_else(|| ApiError::BadRequest("alpha must be a number".into()))?;
        if !(0.0..=1.0).contains(&alpha) {
            return Err(ApiError::Alpha(alpha));
        }
        let which: Component = match obj.get("which") {
            None => Component::Both,
            Some(Value::String(s)) => s.parse().map_err(ApiError::BadRequest)?,
            Some(_) => return Err(ApiError::BadRequest("which must be a string".into())),
        };
        let from = latents(field(&obj, "from")?, &l.info)?;
        let to = latents(field(&obj, "to")?, &l.info)?;
        let mixed = interpolate(&from, &to, alpha, which).map_err(|e| ApiError::BadRequest(e.to_string()))?;
        Ok(Json(json!({ "latents": mixed })).into_response())
    })
    .await
}
