//! HTTP/JSON edit service.

use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::{Duration, SystemTime};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use sketchmod::edit::{reconstruct, run_edit, EditMode, EditOptions, EditRequest};
use sketchmod::network::{Decoding, SketchMod};
use sketchmod::{normalize_stroke, SketchError};
use tower_http::cors::{AllowOrigin, CorsLayer};

use crate::api::{EditResponse, ErrorBody, Health, ModelInfo, NormalizeRequest, NormalizeResponse, ReconstructRequest};

/// A model together with where it came from.
#[derive(Debug)]
pub struct LoadedModel {
    pub model: SketchMod,
    pub stage: String,
    pub checkpoint: String,
    pub content_hash: String,
    modified: Option<SystemTime>,
}

impl LoadedModel {
    pub fn new(model: SketchMod, stage: &str, checkpoint: &str) -> Self {
        LoadedModel {
            content_hash: model.content_hash(),
            model,
            stage: stage.into(),
            checkpoint: checkpoint.into(),
            modified: None,
        }
    }

    fn from_file(path: &Path) -> sketchmod::Result<Self> {
        let modified = std::fs::metadata(path)?.modified().ok();
        let (model, meta) = SketchMod::load(path)?;
        Ok(LoadedModel {
            modified,
            ..LoadedModel::new(model, &meta.stage, &path.display().to_string())
        })
    }

    pub fn info(&self) -> ModelInfo {
        ModelInfo {
            config: self.model.config().clone(),
            config_hash: self.model.config().hash(),
            content_hash: self.content_hash.clone(),
            stage: self.stage.clone(),
            checkpoint: self.checkpoint.clone(),
        }
    }
}

/// The current model snapshot. Requests clone the `Arc` and keep using it
/// even if a reload swaps in a newer one meanwhile.
#[derive(Debug, Default)]
pub struct ModelSlot {
    path: Option<PathBuf>,
    current: RwLock<Option<Arc<LoadedModel>>>,
}

impl ModelSlot {
    pub fn empty() -> Self {
        ModelSlot::default()
    }

    pub fn with_model(model: LoadedModel) -> Self {
        ModelSlot {
            path: None,
            current: RwLock::new(Some(Arc::new(model))),
        }
    }

    /// Watches `path`. A missing or unreadable checkpoint leaves the slot
    /// empty until a later [`reload`](Self::reload) succeeds.
    pub fn watching(path: impl Into<PathBuf>) -> Self {
        let slot = ModelSlot {
            path: Some(path.into()),
            current: RwLock::new(None),
        };
        if let Err(err) = slot.reload() {
            tracing::warn!("no model loaded: {err}");
        }
        slot
    }

    pub fn get(&self) -> Option<Arc<LoadedModel>> {
        self.current.read().expect("model slot lock").clone()
    }

    /// Loads the watched checkpoint if its modification time differs from
    /// the loaded one. Returns whether the snapshot changed. On failure the
    /// previous snapshot stays in place.
    pub fn reload(&self) -> sketchmod::Result<bool> {
        let Some(path) = &self.path else {
            return Ok(false);
        };
        let modified = std::fs::metadata(path)?.modified().ok();
        if let Some(cur) = self.get() {
            if cur.modified.is_some() && cur.modified == modified {
                return Ok(false);
            }
        }
        let loaded = LoadedModel::from_file(path)?;
        tracing::info!(checkpoint = %path.display(), hash = %loaded.content_hash, "model loaded");
        *self.current.write().expect("model slot lock") = Some(Arc::new(loaded));
        Ok(true)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ServiceConfig {
    /// Origins allowed by CORS. Empty allows any origin.
    pub cors_origins: Vec<String>,
    /// How often to check the checkpoint for changes.
    pub reload_interval: Option<Duration>,
}

#[derive(Debug)]
pub enum ApiError {
    BadRequest { message: String, path: Option<String> },
    NotLoaded,
    Domain(SketchError),
    Internal(String),
}

impl From<SketchError> for ApiError {
    fn from(err: SketchError) -> Self {
        ApiError::Domain(err)
    }
}

/// Stable code for a domain error.
pub fn error_code(err: &SketchError) -> &'static str {
    match err {
        SketchError::EmptyStroke => "empty_stroke",
        SketchError::NonFinite(_) => "non_finite",
        SketchError::InvalidStroke(_) => "invalid_stroke",
        SketchError::EmptySketch => "empty_sketch",
        SketchError::TooManyStrokes { .. } => "too_many_strokes",
        SketchError::TooFewStrokes { .. } => "too_few_strokes",
        SketchError::EmptyTarget => "empty_target",
        SketchError::IndexOutOfRange { .. } => "index_out_of_range",
        SketchError::NonFiniteOverride(_) => "non_finite_override",
        SketchError::InvalidTemperature(_) => "invalid_temperature",
        SketchError::MaskAllFalse(_) => "mask_all_false",
        SketchError::Parse { .. } => "parse",
        SketchError::UnsupportedFormat(_) => "unsupported_format",
        SketchError::DataEmpty => "data_empty",
        SketchError::NonFiniteLoss { .. } => "non_finite_loss",
        SketchError::CheckpointMismatch { .. } => "checkpoint_mismatch",
        SketchError::Config(_) => "config",
        SketchError::Io(_) => "io",
        SketchError::Tensor(_) => "tensor",
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match self {
            ApiError::BadRequest { message, path } => (
                StatusCode::BAD_REQUEST,
                ErrorBody {
                    error: "invalid_request".into(),
                    message,
                    path,
                },
            ),
            ApiError::NotLoaded => (
                StatusCode::CONFLICT,
                ErrorBody {
                    error: "model_not_loaded".into(),
                    message: "no model checkpoint is loaded".into(),
                    path: None,
                },
            ),
            ApiError::Domain(err) => (
                StatusCode::UNPROCESSABLE_ENTITY,
                ErrorBody {
                    error: error_code(&err).into(),
                    message: err.to_string(),
                    path: None,
                },
            ),
            ApiError::Internal(message) => (
                StatusCode::INTERNAL_SERVER_ERROR,
                ErrorBody {
                    error: "internal".into(),
                    message,
                    path: None,
                },
            ),
        };
        (status, Json(body)).into_response()
    }
}

/// Deserializes `body`, reporting the JSON path of the first bad field.
pub fn parse_body<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    let mut de = serde_json::Deserializer::from_slice(body);
    let value = serde_path_to_error::deserialize(&mut de).map_err(|err| {
        let path = err.path().to_string();
        ApiError::BadRequest {
            message: err.inner().to_string(),
            path: (path != ".").then_some(path),
        }
    })?;
    de.end().map_err(|err| ApiError::BadRequest {
        message: err.to_string(),
        path: None,
    })?;
    Ok(value)
}

fn missing(field: &str, mode: EditMode) -> ApiError {
    ApiError::BadRequest {
        message: format!(
            "mode {} requires {field}",
            serde_json::to_string(&mode).unwrap_or_default()
        ),
        path: Some(field.into()),
    }
}

/// Mode-specific required fields.
pub fn check_request(req: &EditRequest) -> Result<(), ApiError> {
    match req.mode {
        EditMode::Expand if req.source.is_none() => Err(missing("source", req.mode)),
        EditMode::Replace if req.source.is_none() => Err(missing("source", req.mode)),
        EditMode::Replace if req.replace_index.is_none() => Err(missing("replace_index", req.mode)),
        _ => Ok(()),
    }
}

type AppState = Arc<ModelSlot>;

fn loaded(slot: &ModelSlot) -> Result<Arc<LoadedModel>, ApiError> {
    slot.get().ok_or(ApiError::NotLoaded)
}

/// Runs model work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|err| ApiError::Internal(err.to_string()))?
}

async fn health() -> Json<Health> {
    Json(Health { status: "ok".into() })
}

async fn model_info(State(slot): State<AppState>) -> Result<Json<ModelInfo>, ApiError> {
    Ok(Json(loaded(&slot)?.info()))
}

async fn edit(State(slot): State<AppState>, body: Bytes) -> Result<Json<EditResponse>, ApiError> {
    let req: EditRequest = parse_body(&body)?;
    check_request(&req)?;
    let m = loaded(&slot)?;
    let result = blocking(move || Ok(run_edit(&m.model, &req)?)).await?;
    Ok(Json(EditResponse::from_result(&result)?))
}

async fn reconstruct_handler(State(slot): State<AppState>, body: Bytes) -> Result<Json<EditResponse>, ApiError> {
    let req: ReconstructRequest = parse_body(&body)?;
    let m = loaded(&slot)?;
    let result = blocking(move || {
        let opts = EditOptions {
            decoding: Decoding::from_temperature(req.decode_temperature, req.seed)?,
            geometry_only: false,
        };
        Ok(reconstruct(&m.model, &req.sketch, &opts)?)
    })
    .await?;
    Ok(Json(EditResponse::from_result(&result)?))
}

async fn normalize(body: Bytes) -> Result<Json<NormalizeResponse>, ApiError> {
    let req: NormalizeRequest = parse_body(&body)?;
    let (ns, attributes) = normalize_stroke(&req.stroke)?;
    Ok(Json(NormalizeResponse {
        attributes,
        normalized: ns.stroke,
    }))
}

fn cors(config: &ServiceConfig) -> CorsLayer {
    let origin = if config.cors_origins.is_empty() {
        AllowOrigin::any()
    } else {
        let list: Vec<HeaderValue> = config.cors_origins.iter().filter_map(|o| o.parse().ok()).collect();
        AllowOrigin::list(list)
    };
    CorsLayer::new()
        .allow_origin(origin)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([axum::http::header::CONTENT_TYPE])
}

pub fn router(slot: Arc<ModelSlot>, config: &ServiceConfig) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/model", get(model_info))
        .route("/edit", post(edit))
        .route("/normalize", post(normalize))
        .route("/reconstruct", post(reconstruct_handler))
        .layer(cors(config))
        .with_state(slot)
}

/// Serves until ctrl-c, polling the checkpoint for changes if configured.
pub async fn serve(
    listener: tokio::net::TcpListener,
    slot: Arc<ModelSlot>,
    config: ServiceConfig,
) -> std::io::Result<()> {
    if let Some(every) = config.reload_interval {
        let watched = slot.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(every);
            loop {
                tick.tick().await;
                let s = watched.clone();
                match tokio::task::spawn_blocking(move || s.reload()).await {
                    Ok(Err(err)) => tracing::warn!("reload failed: {err}"),
                    Err(err) => tracing::warn!("reload task failed: {err}"),
                    Ok(Ok(_)) => {}
                }
            }
        });
    }
    let app = router(slot, &config);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
