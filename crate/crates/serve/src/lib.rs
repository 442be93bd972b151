//! JSON-over-HTTP access to checkpoints, traces and averaged attention.
//!
//! Endpoints: `GET /checkpoints`, `POST /run`, `POST /average`.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use horncircuit::explore::{self, AverageRequest, RunRequest, Subset};
use horncircuit::interp::{AveragedAttention, PinvCache};
use horncircuit::model::ModelParams;
use horncircuit::persist::{self, CHECKPOINT_EXT};
use horncircuit::taskgen::Dataset;
use horncircuit::train::EpochMetrics;
use lru::LruCache;
use serde::Serialize;
use tower_http::cors::CorsLayer;

pub const ERROR_SCHEMA: &str = "horncircuit.error/1";
pub const DEFAULT_CACHE: usize = 4;

/// One loaded checkpoint and everything derived from it so far.
struct Loaded {
    params: ModelParams<f32>,
    pinv: Mutex<PinvCache>,
    averages: Mutex<HashMap<Subset, Arc<AveragedAttention>>>,
}

pub struct AppState {
    dir: PathBuf,
    dataset: Option<Arc<Dataset>>,
    cache: Mutex<LruCache<String, Arc<Loaded>>>,
}

impl AppState {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self::with_capacity(dir, DEFAULT_CACHE)
    }

    /// `capacity` is the number of checkpoints kept in memory.
    pub fn with_capacity(dir: impl Into<PathBuf>, capacity: usize) -> Self {
        AppState {
            dir: dir.into(),
            dataset: None,
            cache: Mutex::new(LruCache::new(NonZeroUsize::new(capacity.max(1)).expect("non-zero"))),
        }
    }

    /// Registers the dataset used by `/average`.
    pub fn with_dataset(mut self, dataset: Dataset) -> Self {
        self.dataset = Some(Arc::new(dataset));
        self
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn checkpoint(&self, id: &str) -> Result<Arc<Loaded>, ApiError> {
        if let Some(hit) = self.cache.lock().expect("cache lock").get(id) {
            return Ok(hit.clone());
        }
        // ids are bare file stems; anything path-like cannot name a checkpoint
        let plain = !id.is_empty()
            && !id.starts_with('.')
            && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
        let path = self.dir.join(format!("{id}.{CHECKPOINT_EXT}"));
        if !plain || !path.is_file() {
            return Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown checkpoint {id:?}")));
        }
        let (params, _) = persist::load_checkpoint(&path)?;
        let loaded = Arc::new(Loaded {
            params,
            pinv: Mutex::new(PinvCache::new()),
            averages: Mutex::new(HashMap::new()),
        });
        // a concurrent load of the same id may win; either copy is identical
        self.cache.lock().expect("cache lock").put(id.to_owned(), loaded.clone());
        Ok(loaded)
    }
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    schema: &'static str,
    error: String,
    /// Offending character position in the submitted prompt.
    #[serde(skip_serializing_if = "Option::is_none")]
    position: Option<usize>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, error: impl Into<String>) -> Self {
        ApiError {
            status,
            body: ErrorBody {
                schema: ERROR_SCHEMA,
                error: error.into(),
                position: None,
            },
        }
    }
}

impl From<horncircuit::Error> for ApiError {
    fn from(e: horncircuit::Error) -> Self {
        use horncircuit::Error as E;
        let status = match &e {
            E::Encoding { .. } | E::Input(_) | E::Config(_) | E::Rejected(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let mut err = ApiError::new(status, e.to_string());
        if let E::Encoding { position, .. } = e {
            err.body.position = Some(position);
        }
        err
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

/// Serialized once through the shared encoder so bodies match `inspect --format json`.
fn json_body<T: Serialize>(value: &T) -> Result<Response, ApiError> {
    let text = explore::to_json(value)?;
    Ok(([(header::CONTENT_TYPE, "application/json")], text).into_response())
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

#[derive(Debug, Serialize)]
struct CheckpointInfo {
    id: String,
    tag: String,
    epoch: usize,
    metrics: Option<EpochMetrics>,
}

async fn checkpoints(State(state): State<Arc<AppState>>) -> Result<Response, ApiError> {
    let list = blocking(move || {
        if !state.dir.exists() {
            return Ok(Vec::new());
        }
        Ok(persist::list_checkpoints(&state.dir)?
            .into_iter()
            .map(|e| CheckpointInfo {
                id: e.id,
                tag: e.header.meta.tag,
                epoch: e.header.meta.epoch,
                metrics: e.header.meta.metrics,
            })
            .collect())
    })
    .await?;
    json_body(&list)
}

async fn run(
    State(state): State<Arc<AppState>>,
    req: Result<Json<RunRequest>, JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(req) = req?;
    let resp = blocking(move || {
        let ckpt = state.checkpoint(&req.ckpt)?;
        let mut pinv = ckpt.pinv.lock().expect("pinv lock");
        Ok(explore::run(&ckpt.params, &req, &mut pinv)?)
    })
    .await?;
    json_body(&resp)
}

async fn average(
    State(state): State<Arc<AppState>>,
    req: Result<Json<AverageRequest>, JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(req) = req?;
    let resp = blocking(move || {
        let Some(dataset) = state.dataset.clone() else {
            return Err(ApiError::new(StatusCode::CONFLICT, "no dataset registered with the server"));
        };
        let ckpt = state.checkpoint(&req.ckpt)?;
        let cached = ckpt.averages.lock().expect("averages lock").get(&req.subset).cloned();
        let avg = match cached {
            Some(a) => a,
            None => {
                let subset = req.subset.select(&dataset);
                let sequences: Vec<Vec<u8>> = subset.examples.iter().map(|e| e.tokens()).collect();
                if sequences.is_empty() {
                    return Err(ApiError::new(
                        StatusCode::BAD_REQUEST,
                        format!("the {:?} subset is empty", req.subset),
                    ));
                }
                let a = Arc::new(horncircuit::interp::average_attention(&ckpt.params, &sequences)?);
                ckpt.averages.lock().expect("averages lock").insert(req.subset, a.clone());
                a
            }
        };
        Ok(explore::average_response(
            &avg,
            &req,
            explore::template(dataset.m, dataset.supervision),
        ))
    })
    .await?;
    json_body(&resp)
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/checkpoints", get(checkpoints))
        .route("/run", post(run))
        .route("/average", post(average))
        .layer(CorsLayer::permissive())
        .with_state(Arc::new(state))
}

/// Binds `addr` and serves until the process ends.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}
