//! JSON-over-HTTP inference service for trained snapshots.
//!
//! Routes: `GET /healthz`, `GET /models`, `POST /sr`, `POST /blend`.
//! Images travel as base64-encoded PNG.

mod registry;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::CorsLayer;
use tsr_core::eval;
use tsr_core::imaging::{self, ImageTensor};
use tsr_core::losses::PercepExtractor;
use tsr_core::training::Stage;

pub use registry::{ModelEntry, Registry};

pub const DEFAULT_MAX_SIDE: usize = 512;
pub const DEFAULT_PERCEP_SEED: u64 = 7;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{0}")]
    BadRequest(String),
    #[error("field `{field}`: {message}")]
    BadField { field: &'static str, message: String },
    #[error("image {h}x{w} exceeds the {max}x{max} cap")]
    TooLarge { h: usize, w: usize, max: usize },
    #[error("undecodable image in `{field}`: {message}")]
    Undecodable { field: &'static str, message: String },
    #[error("models not loaded")]
    NotReady,
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error(transparent)]
    Core(#[from] tsr_core::Error),
    #[error("inference task failed: {0}")]
    Join(String),
}

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            Self::BadRequest(_) | Self::BadField { .. } => StatusCode::BAD_REQUEST,
            Self::TooLarge { .. } => StatusCode::PAYLOAD_TOO_LARGE,
            Self::Undecodable { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            Self::NotReady => StatusCode::SERVICE_UNAVAILABLE,
            Self::UnknownModel(_) => StatusCode::NOT_FOUND,
            Self::Core(tsr_core::Error::ShapeMismatch(..)) => StatusCode::BAD_REQUEST,
            Self::Core(_) | Self::Join(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    fn field(&self) -> Option<&'static str> {
        match self {
            Self::BadField { field, .. } | Self::Undecodable { field, .. } => Some(field),
            _ => None,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.to_string() });
        if let Some(f) = self.field() {
            body["field"] = json!(f);
        }
        (self.status(), Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ServiceError>;

/// Shared handler state. The registry slot is empty until models load.
pub struct AppState {
    registry: RwLock<Option<Arc<Registry>>>,
    pub max_side: usize,
    pub percep_seed: u64,
}

impl AppState {
    pub fn new(max_side: usize, percep_seed: u64) -> Self {
        Self {
            registry: RwLock::new(None),
            max_side,
            percep_seed,
        }
    }

    pub fn with_registry(registry: Registry) -> Self {
        let s = Self::new(DEFAULT_MAX_SIDE, DEFAULT_PERCEP_SEED);
        s.set_registry(registry);
        s
    }

    pub fn set_registry(&self, registry: Registry) {
        *self.registry.write().unwrap() = Some(Arc::new(registry));
    }

    fn registry(&self) -> ApiResult<Arc<Registry>> {
        self.registry.read().unwrap().clone().ok_or(ServiceError::NotReady)
    }
}

impl Default for AppState {
    fn default() -> Self {
        Self::new(DEFAULT_MAX_SIDE, DEFAULT_PERCEP_SEED)
    }
}

#[derive(Debug, Deserialize)]
pub struct SrRequest {
    pub image: String,
    pub t_knob: f64,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub gt: Option<String>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct Metrics {
    pub psnr: f64,
    pub ssim: f64,
    pub percep: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SrResponse {
    pub image: String,
    pub model: String,
    pub t_knob: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub metrics: Option<Metrics>,
    pub timing_ms: f64,
}

#[derive(Debug, Deserialize)]
pub struct BlendRequest {
    pub image_f: String,
    pub image_r: String,
    pub alpha: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BlendResponse {
    pub image: String,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/models", get(models))
        .route("/sr", post(sr))
        .route("/blend", post(blend))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Binds `addr`, then loads `models_dir` in the background; `/healthz`
/// answers 503 until loading finishes.
pub async fn serve(addr: SocketAddr, models_dir: PathBuf, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    let loader = state.clone();
    tokio::task::spawn_blocking(move || match Registry::load_dir(&models_dir) {
        Ok(reg) => {
            log::info!("loaded {} models from {}", reg.len(), models_dir.display());
            loader.set_registry(reg);
        }
        Err(e) => log::error!("loading {}: {e}", models_dir.display()),
    });
    axum::serve(listener, router(state)).await
}

async fn healthz(State(state): State<Arc<AppState>>) -> Response {
    match state.registry() {
        Ok(reg) => Json(json!({
            "status": "ok",
            "version": env!("CARGO_PKG_VERSION"),
            "models": reg.len(),
        }))
        .into_response(),
        Err(_) => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(json!({ "status": "loading", "version": env!("CARGO_PKG_VERSION") })),
        )
            .into_response(),
    }
}

async fn models(State(state): State<Arc<AppState>>) -> ApiResult<Json<Vec<ModelEntry>>> {
    Ok(Json(state.registry()?.entries()))
}

fn parse_json<T: serde::de::DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ServiceError::BadRequest(format!("malformed request: {e}")))
}

fn check_unit(field: &'static str, v: f64) -> ApiResult<f64> {
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(ServiceError::BadField {
            field,
            message: format!("{v} is outside [0, 1]"),
        })
    }
}

fn decode_image(field: &'static str, b64: &str, max_side: usize) -> ApiResult<ImageTensor> {
    let bytes = B64.decode(b64.trim()).map_err(|e| ServiceError::BadField {
        field,
        message: format!("invalid base64: {e}"),
    })?;
    let img = imaging::decode_png(&bytes).map_err(|e| ServiceError::Undecodable {
        field,
        message: e.to_string(),
    })?;
    let (_, h, w) = imaging::image_dims(&img)?;
    if h > max_side || w > max_side {
        return Err(ServiceError::TooLarge { h, w, max: max_side });
    }
    Ok(img)
}

fn encode_image(img: &ImageTensor) -> ApiResult<String> {
    Ok(B64.encode(imaging::encode_png(img)?))
}

async fn sr(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<SrResponse>> {
    let req: SrRequest = parse_json(&body)?;
    let t = check_unit("t_knob", req.t_knob)?;
    let alpha = req.alpha.map(|a| check_unit("alpha", a)).transpose()?;
    let reg = state.registry()?;
    let x_lr = decode_image("image", &req.image, state.max_side)?;
    let gt = req
        .gt
        .as_deref()
        .map(|g| decode_image("gt", g, state.max_side * 8))
        .transpose()?;
    let percep_seed = state.percep_seed;
    let model_name = req.model.clone();
    tokio::task::spawn_blocking(move || run_sr(&reg, model_name, x_lr, t, alpha, gt, percep_seed))
        .await
        .map_err(|e| ServiceError::Join(e.to_string()))?
        .map(Json)
}

fn run_sr(
    reg: &Registry,
    model: Option<String>,
    x_lr: ImageTensor,
    t: f64,
    alpha: Option<f64>,
    gt: Option<ImageTensor>,
    percep_seed: u64,
) -> ApiResult<SrResponse> {
    let (name, out, timing_ms) = match alpha {
        None => {
            let name = match model {
                Some(n) => n,
                None => reg.default_name().ok_or(ServiceError::NotReady)?.to_string(),
            };
            let m = reg.get(&name).ok_or_else(|| ServiceError::UnknownModel(name.clone()))?;
            let start = Instant::now();
            let out = m.super_resolve(&x_lr, t)?;
            (name, out, start.elapsed().as_secs_f64() * 1e3)
        }
        Some(a) => {
            let (nf, mf) = reg
                .first_of_stage(Stage::TeacherF)
                .ok_or_else(|| ServiceError::UnknownModel("teacher_f".into()))?;
            let (nr, mr) = reg
                .first_of_stage(Stage::TeacherR)
                .ok_or_else(|| ServiceError::UnknownModel("teacher_r".into()))?;
            let start = Instant::now();
            let xf = mf.super_resolve(&x_lr, 1.0)?;
            let xr = mr.super_resolve(&x_lr, 1.0)?;
            let out = eval::linear_blend(&xf, &xr, a)?;
            (format!("blend({nf},{nr})"), out, start.elapsed().as_secs_f64() * 1e3)
        }
    };
    let metrics = match gt {
        Some(gt) => {
            out.check_same_shape(&gt).map_err(|_| ServiceError::BadField {
                field: "gt",
                message: format!("shape {:?} does not match output {:?}", gt.shape(), out.shape()),
            })?;
            let ex = PercepExtractor::new(percep_seed, gt.shape()[0]);
            Some(Metrics {
                psnr: eval::psnr(&out, &gt)?,
                ssim: eval::ssim(&out, &gt)?,
                percep: ex.dist(&out, &gt)?,
            })
        }
        None => None,
    };
    Ok(SrResponse {
        image: encode_image(&out)?,
        model: name,
        t_knob: t,
        metrics,
        timing_ms,
    })
}

async fn blend(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<BlendResponse>> {
    let req: BlendRequest = parse_json(&body)?;
    let alpha = check_unit("alpha", req.alpha)?;
    let xf = decode_image("image_f", &req.image_f, state.max_side * 8)?;
    let xr = decode_image("image_r", &req.image_r, state.max_side * 8)?;
    if xf.shape() != xr.shape() {
        return Err(ServiceError::BadField {
            field: "image_r",
            message: format!("shape {:?} does not match image_f {:?}", xr.shape(), xf.shape()),
        });
    }
    let out = eval::linear_blend(&xf, &xr, alpha)?;
    Ok(Json(BlendResponse {
        image: encode_image(&out)?,
    }))
}
