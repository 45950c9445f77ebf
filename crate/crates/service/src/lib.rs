//! HTTP facade over the HOT engine: two-step triage sessions, taxonomy and
//! model metadata.
//!
//! Routes (all JSON):
//! * `POST /v1/sessions` multipart clinical image -> 201 session document
//! * `POST /v1/sessions/{id}/dermoscopic` multipart dermoscopic image -> 200
//! * `GET /v1/sessions/{id}`
//! * `GET /v1/taxonomy`, `GET /v1/model`, `GET /v1/health`

use axum::extract::multipart::{Multipart, MultipartRejection};
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use hot_core::checkpoint::Checkpoint;
use hot_core::imaging::Image;
use hot_core::inference::{Engine, HotDecision, InferenceError, SessionStore, TriageSession};
use hot_core::model::ModelError;
use serde::Serialize;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use std::time::{Duration, Instant};

pub const MAX_UPLOAD_ENV: &str = "HOT_MAX_UPLOAD_BYTES";
pub const DEFAULT_MAX_UPLOAD: usize = 10 * 1024 * 1024;
pub const DEFAULT_SESSION_TTL: Duration = Duration::from_secs(3600);
/// Allowance for multipart headers and boundaries on top of the image limit.
const MULTIPART_OVERHEAD: usize = 16 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApiConfig {
    pub bind: SocketAddr,
    pub checkpoint: PathBuf,
    pub max_upload_bytes: usize,
    pub session_ttl: Duration,
    /// Persist sessions here as well as in memory.
    pub session_dir: Option<PathBuf>,
}

impl ApiConfig {
    pub fn new(checkpoint: PathBuf, bind: SocketAddr) -> Self {
        Self {
            bind,
            checkpoint,
            max_upload_bytes: DEFAULT_MAX_UPLOAD,
            session_ttl: DEFAULT_SESSION_TTL,
            session_dir: None,
        }
    }

    /// Applies `HOT_MAX_UPLOAD_BYTES` if set.
    pub fn with_env(mut self) -> Result<Self, ServiceError> {
        if let Ok(v) = std::env::var(MAX_UPLOAD_ENV) {
            self.max_upload_bytes = v
                .trim()
                .parse()
                .map_err(|_| ServiceError::Config(format!("{MAX_UPLOAD_ENV}: not a byte count: `{v}`")))?;
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        if self.session_ttl.is_zero() {
            return Err(ServiceError::Config("session TTL must be positive".into()));
        }
        if self.max_upload_bytes == 0 {
            return Err(ServiceError::Config("max upload bytes must be positive".into()));
        }
        Ok(())
    }
}

struct Loaded {
    engine: Engine,
    digest: String,
}

enum LoadState {
    Loading,
    Ready(Arc<Loaded>),
    Failed(String),
}

pub struct AppState {
    config: ApiConfig,
    load: RwLock<LoadState>,
    store: SessionStore,
    started: Instant,
}

impl AppState {
    pub fn new(config: ApiConfig) -> Arc<Self> {
        Arc::new(Self {
            store: SessionStore::new(config.session_ttl, config.session_dir.clone()),
            config,
            load: RwLock::new(LoadState::Loading),
            started: Instant::now(),
        })
    }

    /// Loads the engine from the configured checkpoint directory. Blocking.
    pub fn load_engine(&self) -> Result<(), String> {
        let result = Engine::load(&self.config.checkpoint)
            .map_err(|e| e.to_string())
            .and_then(|engine| {
                let size = engine.clinical.model.config.image_size;
                if self.config.max_upload_bytes < size * size * 3 {
                    return Err(format!(
                        "max upload {} bytes is below one raw {size}x{size} image",
                        self.config.max_upload_bytes
                    ));
                }
                engine.thresholds().map_err(|e| e.to_string())?;
                let digest = Checkpoint::digest(&self.config.checkpoint).map_err(|e| e.to_string())?;
                Ok(Loaded { engine, digest })
            });
        let mut slot = self.load.write().expect("load lock");
        match result {
            Ok(l) => {
                *slot = LoadState::Ready(Arc::new(l));
                Ok(())
            }
            Err(e) => {
                *slot = LoadState::Failed(e.clone());
                Err(e)
            }
        }
    }

    fn loaded(&self) -> Result<Arc<Loaded>, ApiError> {
        match &*self.load.read().expect("load lock") {
            LoadState::Ready(l) => Ok(l.clone()),
            LoadState::Loading => Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "not_ready", "model is loading")),
            LoadState::Failed(e) => Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "load_failed", e)),
        }
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn bad_image(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_image", message)
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
    message: &'a str,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.code,
            message: &self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

impl From<InferenceError> for ApiError {
    fn from(e: InferenceError) -> Self {
        let status = match &e {
            InferenceError::UnknownSession(_) => (StatusCode::NOT_FOUND, "unknown_session"),
            InferenceError::DuplicateDermoscopic(_) => (StatusCode::CONFLICT, "duplicate_dermoscopic"),
            InferenceError::ModalityMismatch(_) | InferenceError::Model(ModelError::ShapeMismatch(_)) => {
                (StatusCode::BAD_REQUEST, "unsupported_input")
            }
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self::new(status.0, status.1, e.to_string())
    }
}

/// Session document on the wire.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct SessionDoc {
    pub session_id: String,
    pub decision: HotDecision,
    pub combined: Option<HotDecision>,
    pub created_ms: u64,
    pub updated_ms: u64,
}

impl From<TriageSession> for SessionDoc {
    fn from(s: TriageSession) -> Self {
        Self {
            session_id: s.session_id,
            decision: s.clinical,
            combined: s.combined,
            created_ms: s.created_ms,
            updated_ms: s.updated_ms,
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.config.max_upload_bytes + MULTIPART_OVERHEAD;
    Router::new()
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sessions/{id}/dermoscopic", post(add_dermoscopic))
        .route("/v1/taxonomy", get(taxonomy))
        .route("/v1/model", get(model))
        .route("/v1/health", get(health))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

/// Reads the first file field of a multipart upload.
async fn read_upload(max: usize, upload: Result<Multipart, MultipartRejection>) -> Result<Vec<u8>, ApiError> {
    let mut upload = upload.map_err(|e| ApiError::bad_image(e.body_text()))?;
    let field = upload
        .next_field()
        .await
        .map_err(|e| ApiError::new(e.status(), "bad_upload", e.body_text()))?
        .ok_or_else(|| ApiError::bad_image("no image field in upload"))?;
    let bytes = field
        .bytes()
        .await
        .map_err(|e| ApiError::new(e.status(), "bad_upload", e.body_text()))?;
    if bytes.len() > max {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            "too_large",
            format!("upload of {} bytes exceeds {max}", bytes.len()),
        ));
    }
    if bytes.is_empty() {
        return Err(ApiError::bad_image("empty image"));
    }
    Ok(bytes.to_vec())
}

fn decode(bytes: &[u8], size: usize) -> Result<Image, ApiError> {
    Image::decode(bytes, size).map_err(|e| ApiError::bad_image(e.to_string()))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    upload: Result<Multipart, MultipartRejection>,
) -> Result<(StatusCode, Json<SessionDoc>), ApiError> {
    let loaded = state.loaded()?;
    let bytes = read_upload(state.config.max_upload_bytes, upload).await?;
    let st = state.clone();
    let session = blocking(move || {
        let img = decode(&bytes, loaded.engine.clinical.model.config.image_size)?;
        Ok(st.store.open(&loaded.engine, &img)?)
    })
    .await?;
    log::info!("session {} opened", session.session_id);
    Ok((StatusCode::CREATED, Json(session.into())))
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<SessionDoc>, ApiError> {
    let loaded = state.loaded()?;
    let size = loaded.engine.clinical.model.config.image_size;
    Ok(Json(state.store.get(&id, size)?.into()))
}

async fn add_dermoscopic(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    upload: Result<Multipart, MultipartRejection>,
) -> Result<Json<SessionDoc>, ApiError> {
    let loaded = state.loaded()?;
    let size = loaded.engine.clinical.model.config.image_size;
    // Read the body before rejecting, or the client sees a reset instead of the status.
    let bytes = read_upload(state.config.max_upload_bytes, upload).await;
    let existing = state.store.get(&id, size)?;
    if existing.combined.is_some() {
        return Err(InferenceError::DuplicateDermoscopic(id).into());
    }
    let bytes = bytes?;
    let st = state.clone();
    let session = blocking(move || {
        let img = decode(&bytes, size)?;
        Ok(st.store.submit_dermoscopic(&loaded.engine, &id, &img)?)
    })
    .await?;
    Ok(Json(session.into()))
}

#[derive(Serialize)]
struct Level2Doc<'a> {
    name: &'a str,
    parent: &'a str,
}

#[derive(Serialize)]
struct Level3Doc<'a> {
    name: &'a str,
    parent: &'a str,
    level1: &'a str,
    in_distribution: bool,
}

#[derive(Serialize)]
struct TaxonomyDoc<'a> {
    level1: &'a [String],
    level2: Vec<Level2Doc<'a>>,
    level3: Vec<Level3Doc<'a>>,
    /// Level-3 names the model can predict, in output order.
    id_level3: Vec<&'a str>,
}

async fn taxonomy(State(state): State<Arc<AppState>>) -> Result<Response, ApiError> {
    let loaded = state.loaded()?;
    let t = loaded.engine.taxonomy();
    let doc = TaxonomyDoc {
        level1: &t.level1,
        level2: t
            .level2
            .iter()
            .map(|c| Level2Doc {
                name: &c.name,
                parent: &t.level1[c.parent],
            })
            .collect(),
        level3: t
            .level3
            .iter()
            .enumerate()
            .map(|(i, c)| Level3Doc {
                name: &c.name,
                parent: &t.level2[c.parent].name,
                level1: &t.level1[t.level2[c.parent].parent],
                in_distribution: t.id_flags[i],
            })
            .collect(),
        id_level3: t.id_level3().into_iter().map(|i| t.level3[i].name.as_str()).collect(),
    };
    Ok(Json(doc).into_response())
}

#[derive(Serialize)]
struct ThresholdDoc {
    t_ood: f64,
    t_triage: Option<f64>,
}

#[derive(Serialize)]
struct PassDoc {
    variant: String,
    modality: String,
    image_size: usize,
    thresholds: ThresholdDoc,
}

#[derive(Serialize)]
struct ModelDoc {
    variant: String,
    modality: String,
    image_size: usize,
    thresholds: ThresholdDoc,
    /// Model serving the dermoscopic follow-up, if any.
    combined: Option<PassDoc>,
    checkpoint_digest: String,
}

async fn model(State(state): State<Arc<AppState>>) -> Result<Json<ModelDoc>, ApiError> {
    let loaded = state.loaded()?;
    let e = &loaded.engine;
    let cfg = &e.clinical.model.config;
    let th = e.thresholds()?;
    let combined = match (e.combined_checkpoint(), e.combined_thresholds()) {
        (Some(ck), Ok(t)) => Some(PassDoc {
            variant: ck.model.config.variant.to_string(),
            modality: ck.model.config.modality.to_string(),
            image_size: ck.model.config.image_size,
            thresholds: ThresholdDoc {
                t_ood: t.t_ood,
                t_triage: t.t_triage,
            },
        }),
        _ => None,
    };
    Ok(Json(ModelDoc {
        variant: cfg.variant.to_string(),
        modality: cfg.modality.to_string(),
        image_size: cfg.image_size,
        thresholds: ThresholdDoc {
            t_ood: th.t_ood,
            t_triage: th.t_triage,
        },
        combined,
        checkpoint_digest: loaded.digest.clone(),
    }))
}

#[derive(Serialize)]
struct HealthDoc {
    status: &'static str,
    uptime_s: f64,
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    let uptime_s = state.started.elapsed().as_secs_f64();
    match state.loaded() {
        Ok(_) => Json(HealthDoc { status: "ok", uptime_s }).into_response(),
        Err(e) => {
            let status = if e.code == "load_failed" { "failed" } else { "loading" };
            (StatusCode::SERVICE_UNAVAILABLE, Json(HealthDoc { status, uptime_s })).into_response()
        }
    }
}

/// Serves on `listener`, loading the engine in the background so that
/// `/v1/health` answers 503 until it is ready.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> Result<(), ServiceError> {
    state.config.validate()?;
    let loader = state.clone();
    tokio::task::spawn_blocking(move || match loader.load_engine() {
        Ok(()) => log::info!("engine loaded from {}", loader.config.checkpoint.display()),
        Err(e) => log::error!("engine load failed: {e}"),
    });
    axum::serve(listener, router(state)).await?;
    Ok(())
}

/// Binds `config.bind` and serves until the process ends.
pub async fn run(config: ApiConfig) -> Result<(), ServiceError> {
    config.validate()?;
    let listener = tokio::net::TcpListener::bind(config.bind).await?;
    log::info!("listening on {}", listener.local_addr()?);
    serve(listener, AppState::new(config)).await
}
