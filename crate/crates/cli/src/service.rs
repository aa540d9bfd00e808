//! HTTP detection service.
//!
//! | method | path          | body                       | response                    |
//! |--------|---------------|----------------------------|-----------------------------|
//! | POST   | `/detect`     | [`DetectRequest`] JSON     | [`DetectResponse`] JSON     |
//! | GET    | `/healthz`    |                            | `ok`                        |
//! | GET    | `/model`      |                            | [`ModelInfo`] JSON          |
//! | POST   | `/images`     | encoded image bytes        | [`ImageInfo`] JSON          |
//! | GET    | `/images/:id` |                            | PNG                         |
//!
//! Errors are `{"error": "..."}` with status 400 (malformed request), 404,
//! 413 (image over 16 MiB) or 500.

use std::collections::HashMap;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::io::Cursor;
use std::path::Path;
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use image::RgbImage;
use serde::{Deserialize, Serialize};
use tmr_core::boxes::BoxXYWH;
use tmr_core::checkpoint::load_checkpoint;
use tmr_core::infer::{detect, Detection, InferConfig};
use tmr_core::model::{ModelInput, TmrModel};
use tmr_core::synthbench::image_to_grid;

use crate::error::{CliError, CliResult};

/// Largest accepted image, encoded.
pub const MAX_IMAGE_BYTES: usize = 16 * 1024 * 1024;
/// Largest accepted side of a decoded image.
pub const MAX_IMAGE_SIDE: u32 = 4096;
/// Finest feature-map resolution (cells along the longer side) a request may ask for.
pub const MAX_SCALE_CELLS: usize = 512;

/// A checkpoint loaded for serving; never mutated afterwards.
pub struct LoadedModel {
    pub name: String,
    pub version: String,
    pub model: TmrModel<f32>,
}

impl LoadedModel {
    pub fn load(path: &Path) -> CliResult<Self> {
        let ck = load_checkpoint(path)?;
        let name = path
            .file_stem()
            .map_or_else(|| "model".to_string(), |s| s.to_string_lossy().into_owned());
        Ok(Self {
            version: format!("{name}@{}", ck.step),
            name,
            model: ck.model,
        })
    }

    pub fn variant(&self) -> &'static str {
        self.model.config.match_variant.name()
    }
}

/// Detection options shared by the CLI and the service.
#[derive(Clone, Debug)]
pub struct DetectOptions {
    pub tau: f64,
    pub scales: Vec<usize>,
    /// Use every exemplar (few-shot); otherwise only the first.
    pub aggregate: bool,
}

impl DetectOptions {
    pub fn from_infer(cfg: &InferConfig) -> Self {
        Self {
            tau: cfg.tau,
            scales: cfg.scales.clone(),
            aggregate: true,
        }
    }

    fn infer_config(&self) -> InferConfig {
        InferConfig {
            tau: self.tau,
            scales: self.scales.clone(),
            ..InferConfig::default()
        }
    }
}

/// The single detection path behind `tmr detect` and `POST /detect`.
pub fn run_detection(
    model: &LoadedModel,
    image: &RgbImage,
    exemplars: &[BoxXYWH],
    opts: &DetectOptions,
) -> CliResult<Vec<Detection>> {
    if exemplars.is_empty() {
        return Err(CliError::user("at least one exemplar is required"));
    }
    for e in exemplars {
        e.validate()?;
    }
    let used = if opts.aggregate {
        exemplars
    } else {
        &exemplars[..1]
    };
    let cfg = opts.infer_config();
    cfg.validate()?;
    let input = ModelInput::Image(image_to_grid::<f32>(image));
    Ok(detect(&model.model, &input, used, &cfg)?)
}

pub fn decode_image(bytes: &[u8]) -> CliResult<RgbImage> {
    if bytes.len() > MAX_IMAGE_BYTES {
        return Err(CliError::user("image exceeds 16 MiB"));
    }
    let img = image::load_from_memory(bytes)
        .map_err(|e| CliError::user(format!("cannot decode image: {e}")))?;
    if img.width() > MAX_IMAGE_SIDE || img.height() > MAX_IMAGE_SIDE {
        return Err(CliError::user(format!(
            "image sides are limited to {MAX_IMAGE_SIDE} pixels"
        )));
    }
    Ok(img.to_rgb8())
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectRequest {
    /// Id returned by `POST /images`.
    #[serde(default)]
    pub image_id: Option<String>,
    /// Inline base64-encoded image.
    #[serde(default)]
    pub image: Option<String>,
    pub exemplars: Vec<[f64; 4]>,
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default)]
    pub aggregate: Option<bool>,
    #[serde(default)]
    pub scales: Option<Vec<usize>>,
    /// Matching variant of the model to use; the default model if absent.
    #[serde(default)]
    pub variant: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectResponse {
    pub detections: Vec<Detection>,
    pub timing_ms: f64,
    pub model_version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub name: String,
    pub variant: String,
    pub decode_variant: String,
    pub params: usize,
    pub version: String,
    /// Variants selectable through `DetectRequest::variant`.
    pub variants: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: String,
    pub width: u32,
    pub height: u32,
}

struct StoredImage {
    png: Vec<u8>,
    image: Arc<RgbImage>,
}

struct AppState {
    models: Vec<Arc<LoadedModel>>,
    defaults: InferConfig,
    images: RwLock<HashMap<String, StoredImage>>,
}

/// Error body plus status.
#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl ApiError {
    fn bad_request(msg: impl Into<String>) -> Self {
        Self(StatusCode::BAD_REQUEST, msg.into())
    }
}

impl From<CliError> for ApiError {
    fn from(e: CliError) -> Self {
        match e {
            CliError::User(m) => Self(StatusCode::BAD_REQUEST, m),
            CliError::Internal(m) => Self(StatusCode::INTERNAL_SERVER_ERROR, m),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

/// Content-derived id, so uploading the same bytes twice yields the same id.
fn image_id(bytes: &[u8]) -> String {
    let mut h = DefaultHasher::new();
    bytes.hash(&mut h);
    format!("{:016x}", h.finish())
}

fn too_large() -> ApiError {
    ApiError(StatusCode::PAYLOAD_TOO_LARGE, "image exceeds 16 MiB".into())
}

/// Builds the router. The first model is the default; further models are
/// reachable by their matching variant name.
pub fn router(models: Vec<LoadedModel>, defaults: InferConfig) -> CliResult<Router> {
    if models.is_empty() {
        return Err(CliError::user("at least one model is required"));
    }
    let mut seen = Vec::new();
    for m in &models {
        if seen.contains(&m.variant()) {
            return Err(CliError::user(format!(
                "two models share the variant {}",
                m.variant()
            )));
        }
        seen.push(m.variant());
    }
    defaults.validate()?;
    let state = Arc::new(AppState {
        models: models.into_iter().map(Arc::new).collect(),
        defaults,
        images: RwLock::new(HashMap::new()),
    });
    // base64 inflates the image by 4/3; leave room for the rest of the JSON
    let detect_limit = MAX_IMAGE_BYTES / 3 * 4 + 64 * 1024;
    Ok(Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route("/model", get(model_info))
        .route(
            "/detect",
            post(detect_handler).layer(DefaultBodyLimit::max(detect_limit)),
        )
        .route(
            "/images",
            post(upload_image).layer(DefaultBodyLimit::max(MAX_IMAGE_BYTES)),
        )
        .route("/images/{id}", get(fetch_image))
        .with_state(state))
}

async fn model_info(State(state): State<Arc<AppState>>) -> Json<ModelInfo> {
    let m = &state.models[0];
    Json(ModelInfo {
        name: m.name.clone(),
        variant: m.variant().to_string(),
        decode_variant: m.model.config.decode_variant.name().to_string(),
        params: m.model.param_count(),
        version: m.version.clone(),
        variants: state
            .models
            .iter()
            .map(|m| m.variant().to_string())
            .collect(),
    })
}

async fn upload_image(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> Result<Json<ImageInfo>, ApiError> {
    if body.len() > MAX_IMAGE_BYTES {
        return Err(too_large());
    }
    let id = image_id(&body);
    let image = tokio::task::spawn_blocking(move || decode_image(&body))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    let info = ImageInfo {
        id: id.clone(),
        width: image.width(),
        height: image.height(),
    };
    let mut png = Vec::new();
    image
        .write_to(&mut Cursor::new(&mut png), image::ImageFormat::Png)
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let mut images = state.images.write().unwrap_or_else(|p| p.into_inner());
    images.entry(id).or_insert(StoredImage {
        png,
        image: Arc::new(image),
    });
    Ok(Json(info))
}

async fn fetch_image(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Response, ApiError> {
    let images = state.images.read().unwrap_or_else(|p| p.into_inner());
    let stored = images
        .get(&id)
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown image id {id}")))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], stored.png.clone()).into_response())
}

async fn detect_handler(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> Result<Json<DetectResponse>, ApiError> {
    let start = Instant::now();
    let req: DetectRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::bad_request(format!("malformed request: {e}")))?;
    if req.exemplars.is_empty() {
        return Err(ApiError::bad_request("at least one exemplar is required"));
    }
    if let Some(t) = req.tau {
        if !(t > 0.0 && t < 1.0) {
            return Err(ApiError::bad_request(format!(
                "tau must lie in (0, 1), got {t}"
            )));
        }
    }
    if let Some(s) = &req.scales {
        if s.is_empty() || s.iter().any(|&f| f == 0 || f > MAX_SCALE_CELLS) {
            return Err(ApiError::bad_request(format!(
                "scales must be 1..={MAX_SCALE_CELLS}"
            )));
        }
    }
    let model = match &req.variant {
        None => state.models[0].clone(),
        Some(v) => state
            .models
            .iter()
            .find(|m| m.variant() == v)
            .cloned()
            .ok_or_else(|| ApiError::bad_request(format!("variant {v:?} is not loaded")))?,
    };
    let exemplars = req
        .exemplars
        .iter()
        .map(|&[cx, cy, w, h]| {
            let b = BoxXYWH::new_unchecked(cx, cy, w, h);
            b.validate()
                .map(|_| b)
                .map_err(|e| ApiError::bad_request(e.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let image = match (&req.image_id, &req.image) {
        (Some(id), None) => {
            let images = state.images.read().unwrap_or_else(|p| p.into_inner());
            images
                .get(id)
                .map(|s| s.image.clone())
                .ok_or_else(|| ApiError::bad_request(format!("unknown image id {id}")))?
        }
        (None, Some(b64)) => {
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(b64)
                .map_err(|e| ApiError::bad_request(format!("invalid base64 image: {e}")))?;
            if bytes.len() > MAX_IMAGE_BYTES {
                return Err(too_large());
            }
            Arc::new(decode_image(&bytes)?)
        }
        _ => {
            return Err(ApiError::bad_request(
                "give exactly one of image_id and image",
            ))
        }
    };
    let mut opts = DetectOptions::from_infer(&state.defaults);
    opts.tau = req.tau.unwrap_or(opts.tau);
    opts.aggregate = req.aggregate.unwrap_or(true);
    if let Some(s) = req.scales {
        opts.scales = s;
    }
    let version = model.version.clone();
    let detections =
        tokio::task::spawn_blocking(move || run_detection(&model, &image, &exemplars, &opts))
            .await
            .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(DetectResponse {
        detections,
        timing_ms: start.elapsed().as_secs_f64() * 1e3,
        model_version: version,
    }))
}

/// Serves until the process is stopped.
pub async fn serve(app: Router, addr: &str) -> CliResult<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| CliError::user(format!("cannot bind {addr}: {e}")))?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app)
        .await
        .map_err(|e| CliError::Internal(e.to_string()))
}
