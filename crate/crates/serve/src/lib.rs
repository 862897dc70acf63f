//! HTTP inference service.
//!
//! * `GET  /api/v1/health`  → `{"status":"ok","model_version":…}`
//! * `POST /api/v1/predict` → multipart field `image` (PNG, at most 5 MiB) →
//!   `{"label","probabilities":{"parasitized","uninfected"},"model_version"}`
//!
//! Every non-200 response has the body `{"error": code, "message": text}`.
//! Handlers share one immutable model; inference runs on the blocking pool.

use std::future::Future;
use std::path::Path;
use std::sync::Arc;

use axum::extract::multipart::MultipartRejection;
use axum::extract::{DefaultBodyLimit, Multipart, State};
use axum::http::{HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use malaria_core::checkpoint::{model_version, Checkpoint, CheckpointError};
use malaria_core::data::{preprocess_image, DataError};
use malaria_core::train::argmax_rows;
use malaria_core::{ModelGraph, Tensor, CLASS_NAMES};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::net::TcpListener;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

pub const MAX_UPLOAD_BYTES: usize = 5 * 1024 * 1024;
/// Past this many bytes an oversized upload is no longer drained before replying.
const DRAIN_LIMIT: usize = 64 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Probabilities {
    pub parasitized: f32,
    pub uninfected: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: String,
    pub probabilities: Probabilities,
    pub model_version: String,
}

#[derive(Debug, Error)]
pub enum PredictError {
    #[error("{0}")]
    Decode(String),
    #[error("upload of {size} bytes exceeds the {limit}-byte limit")]
    TooLarge { size: usize, limit: usize },
    #[error("no model is loaded")]
    Unavailable,
    #[error("inference failed: {0}")]
    Internal(String),
}

impl PredictError {
    pub fn code(&self) -> &'static str {
        match self {
            PredictError::Decode(_) => "decode_error",
            PredictError::TooLarge { .. } => "too_large",
            PredictError::Unavailable => "model_unavailable",
            PredictError::Internal(_) => "internal_error",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            PredictError::Decode(_) => StatusCode::BAD_REQUEST,
            PredictError::TooLarge { .. } => StatusCode::PAYLOAD_TOO_LARGE,
            PredictError::Unavailable => StatusCode::SERVICE_UNAVAILABLE,
            PredictError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

/// A loaded model plus the hash that identifies it.
#[derive(Debug, Clone)]
pub struct Predictor {
    model: ModelGraph<f32>,
    version: String,
}

impl Predictor {
    pub fn new(model: ModelGraph<f32>, version: impl Into<String>) -> Self {
        Predictor {
            model,
            version: version.into(),
        }
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let ck = Checkpoint::<f32>::from_bytes(bytes)?;
        Ok(Predictor::new(ck.model, model_version(bytes)))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_checkpoint_bytes(&bytes)
    }

    pub fn model(&self) -> &ModelGraph<f32> {
        &self.model
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    /// Preprocess, run the model in inference mode and label by argmax
    /// (ties go to the lower class index).
    pub fn predict(&self, image: &[u8]) -> Result<Prediction, PredictError> {
        if image.len() > MAX_UPLOAD_BYTES {
            return Err(PredictError::TooLarge {
                size: image.len(),
                limit: MAX_UPLOAD_BYTES,
            });
        }
        let input = preprocess_image(image).map_err(|e| match e {
            DataError::Decode(reason) => PredictError::Decode(reason),
            other => PredictError::Internal(other.to_string()),
        })?;
        let batch = Tensor::stack(&[input]).map_err(|e| PredictError::Internal(e.to_string()))?;
        let probs = self
            .model
            .predict_proba(&batch)
            .map_err(|e| PredictError::Internal(e.to_string()))?;
        let p = probs.data();
        let best = argmax_rows(CLASS_NAMES.len(), p)[0];
        Ok(Prediction {
            label: CLASS_NAMES[best].to_string(),
            probabilities: Probabilities {
                parasitized: p[0],
                uninfected: p[1],
            },
            model_version: self.version.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            code: "bad_request",
            message: message.into(),
        }
    }
}

impl From<PredictError> for ApiError {
    fn from(e: PredictError) -> Self {
        ApiError {
            status: e.status(),
            code: e.code(),
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.code.to_string(),
            message: self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

/// Allowed browser origins.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum CorsPolicy {
    #[default]
    Any,
    Origins(Vec<String>),
    Disabled,
}

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub max_upload_bytes: usize,
    pub cors: CorsPolicy,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig {
            max_upload_bytes: MAX_UPLOAD_BYTES,
            cors: CorsPolicy::Any,
        }
    }
}

#[derive(Clone)]
struct AppState {
    predictor: Option<Arc<Predictor>>,
    max_upload: usize,
}

#[derive(Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_version: String,
}

async fn health(State(state): State<AppState>) -> Result<Json<Health>, ApiError> {
    let predictor = state.predictor.ok_or(PredictError::Unavailable)?;
    Ok(Json(Health {
        status: "ok".into(),
        model_version: predictor.version().to_string(),
    }))
}

async fn predict(
    State(state): State<AppState>,
    multipart: Result<Multipart, MultipartRejection>,
) -> Result<Json<Prediction>, ApiError> {
    let predictor = state.predictor.clone().ok_or(PredictError::Unavailable)?;
    let mut multipart = multipart.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let mut image = None;
    while let Some(mut field) = multipart
        .next_field()
        .await
        .map_err(|e| ApiError::bad_request(e.body_text()))?
    {
        if field.name() != Some("image") {
            continue;
        }
        let mut bytes = Vec::new();
        let mut seen = 0usize;
        while let Some(chunk) = field
            .chunk()
            .await
            .map_err(|e| ApiError::bad_request(e.body_text()))?
        {
            seen += chunk.len();
            if seen <= state.max_upload {
                bytes.extend_from_slice(&chunk);
            } else if seen > DRAIN_LIMIT {
                break;
            }
        }
        if seen > state.max_upload {
            return Err(PredictError::TooLarge {
                size: seen,
                limit: state.max_upload,
            }
            .into());
        }
        image = Some(bytes);
        break;
    }
    let image =
        image.ok_or_else(|| ApiError::bad_request("multipart field \"image\" is missing"))?;
    let prediction = tokio::task::spawn_blocking(move || predictor.predict(&image))
        .await
        .map_err(|e| PredictError::Internal(e.to_string()))??;
    Ok(Json(prediction))
}

async fn not_found() -> ApiError {
    ApiError {
        status: StatusCode::NOT_FOUND,
        code: "not_found",
        message: "no such endpoint".into(),
    }
}

async fn method_not_allowed() -> ApiError {
    ApiError {
        status: StatusCode::METHOD_NOT_ALLOWED,
        code: "method_not_allowed",
        message: "method not allowed for this endpoint".into(),
    }
}

fn cors_layer(policy: &CorsPolicy) -> Option<CorsLayer> {
    let base = CorsLayer::new()
        .allow_methods([Method::GET, Method::POST])
        .allow_headers(Any);
    match policy {
        CorsPolicy::Disabled => None,
        CorsPolicy::Any => Some(base.allow_origin(Any)),
        CorsPolicy::Origins(list) => {
            let origins: Vec<HeaderValue> = list.iter().filter_map(|o| o.parse().ok()).collect();
            Some(base.allow_origin(AllowOrigin::list(origins)))
        }
    }
}

/// Build the service. `None` serves every model-dependent endpoint as 503.
pub fn router(predictor: Option<Arc<Predictor>>, config: &ServeConfig) -> Router {
    let state = AppState {
        predictor,
        max_upload: config.max_upload_bytes,
    };
    let app = Router::new()
        .route("/api/v1/health", get(health))
        .route("/api/v1/predict", post(predict))
        .fallback(not_found)
        .method_not_allowed_fallback(method_not_allowed)
        // the handler enforces its own limit so it can answer with a JSON 413
        .layer(DefaultBodyLimit::disable())
        .with_state(state);
    match cors_layer(&config.cors) {
        Some(cors) => app.layer(cors),
        None => app,
    }
}

/// Serve until `shutdown` resolves; in-flight requests are allowed to finish.
pub async fn serve(
    listener: TcpListener,
    app: Router,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, app)
        .with_graceful_shutdown(shutdown)
        .await
}

/// Resolves on Ctrl-C or SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}
