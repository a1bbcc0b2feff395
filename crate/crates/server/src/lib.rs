//! HTTP+JSON service behind the annotation editor.
//!
//! Routes:
//!
//! | method | path | body |
//! |---|---|---|
//! | GET | `/api/queue?order=loss_desc` | `[{frame_id, loss}]` |
//! | GET | `/api/frames/{id}/image` | PNG |
//! | GET | `/api/frames/{id}/annotations` | `FrameRecord`, `ETag: "<revision>"` |
//! | GET | `/api/frames/{id}/predictions` | `{detections: [{bbox, score, rings}], map_url?}` |
//! | PUT | `/api/frames/{id}/annotations` | `FrameRecord` → `{revision}` |
//! | POST | `/api/recompute` | `{job_id}` |
//! | GET | `/api/jobs/{job_id}` | `{job_id, status, progress}` |
//!
//! Ring maps are served as static files under `/maps/`.

mod store;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Body;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use fringe_core::annot::FieldError;
use fringe_core::config::RunConfig;
use fringe_core::geometry::BBox;
use fringe_core::pipeline::{map_file_name, Predictor};
use fringe_core::FrameRecord;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::CorsLayer;
use tower_http::services::ServeDir;

pub use store::{JobInfo, JobStatus, Session, SessionStore, StoreError, ANNOTATIONS_FILE, MAPS_DIR, PREDICTIONS_FILE};

pub const DEFAULT_PORT: u16 = 8077;

type Shared = Arc<SessionStore>;

/// JSON error response.
pub struct ApiError {
    status: StatusCode,
    message: String,
    fields: Vec<FieldError>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
            fields: Vec::new(),
        }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let status = match &e {
            StoreError::NotLoaded => StatusCode::SERVICE_UNAVAILABLE,
            StoreError::NotFound(_) => StatusCode::NOT_FOUND,
            StoreError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            StoreError::Conflict { .. } | StoreError::JobActive => StatusCode::CONFLICT,
            StoreError::Core(_) | StoreError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let fields = match &e {
            StoreError::Invalid(f) => f.clone(),
            _ => Vec::new(),
        };
        ApiError {
            status,
            message: e.to_string(),
            fields,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = if self.fields.is_empty() {
            json!({ "error": self.message })
        } else {
            json!({ "error": self.message, "fields": self.fields })
        };
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn etag(revision: u64) -> HeaderValue {
    HeaderValue::from_str(&format!("\"{revision}\"")).expect("digits are a valid header value")
}

/// Accepts `3`, `"3"` and `W/"3"`.
fn parse_if_match(headers: &HeaderMap) -> ApiResult<Option<u64>> {
    let Some(v) = headers.get(header::IF_MATCH) else {
        return Ok(None);
    };
    let bad = || ApiError::new(StatusCode::BAD_REQUEST, "If-Match must carry a revision number");
    let s = v.to_str().map_err(|_| bad())?.trim();
    let s = s.strip_prefix("W/").unwrap_or(s).trim_matches('"');
    s.parse().map(Some).map_err(|_| bad())
}

#[derive(Deserialize)]
struct QueueParams {
    order: Option<String>,
}

async fn queue(State(st): State<Shared>, Query(q): Query<QueueParams>) -> ApiResult<Response> {
    match q.order.as_deref() {
        None | Some("loss_desc") => {}
        Some(other) => {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                format!("unknown order '{other}'; expected 'loss_desc'"),
            ))
        }
    }
    let (ranking, rev) = st.read(|s| (s.ranking(), s.revision))?;
    Ok(([(header::ETAG, etag(rev))], Json(ranking.entries)).into_response())
}

async fn frame_image(State(st): State<Shared>, Path(id): Path<String>) -> ApiResult<Response> {
    let path = st.image_path(&id)?;
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError::new(StatusCode::NOT_FOUND, format!("{}: {e}", path.display())))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], Body::from(bytes)).into_response())
}

async fn get_annotations(State(st): State<Shared>, Path(id): Path<String>) -> ApiResult<Response> {
    let (rec, rev) = st.read(|s| (s.frame(&id).cloned(), s.revision))?;
    let rec = rec.ok_or(StoreError::NotFound(id))?;
    Ok(([(header::ETAG, etag(rev))], Json(rec)).into_response())
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct DetectionView {
    pub bbox: BBox,
    pub score: f64,
    pub rings: f64,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct PredictionsView {
    pub detections: Vec<DetectionView>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map_url: Option<String>,
}

async fn get_predictions(State(st): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<PredictionsView>> {
    let view = st.read(|s| {
        s.frame(&id)?;
        let detections = s
            .predictions
            .get(&id)
            .map(|ds| {
                ds.iter()
                    .map(|d| DetectionView {
                        bbox: d.bbox,
                        score: d.score,
                        rings: d.ellipse.rings,
                    })
                    .collect()
            })
            .unwrap_or_default();
        let map_url = s.maps.contains(&id).then(|| format!("/{MAPS_DIR}/{}", map_file_name(&id)));
        Some(PredictionsView { detections, map_url })
    })?;
    view.map(Json).ok_or_else(|| StoreError::NotFound(id).into())
}

async fn put_annotations(
    State(st): State<Shared>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Result<Json<FrameRecord>, JsonRejection>,
) -> ApiResult<Response> {
    let Json(record) = body.map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.body_text()))?;
    let if_match = parse_if_match(&headers)?;
    let rev = tokio::task::spawn_blocking(move || st.put_annotations(&id, record, if_match))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(([(header::ETAG, etag(rev))], Json(json!({ "revision": rev }))).into_response())
}

async fn recompute(State(st): State<Shared>) -> ApiResult<Response> {
    let id = st.start_recompute()?;
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": id }))).into_response())
}

async fn job(State(st): State<Shared>, Path(id): Path<u64>) -> ApiResult<Json<JobInfo>> {
    st.job(id)
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown job {id}")))
}

/// Build the application. `static_dir`, when given, is served at `/` for
/// the editor's assets.
pub fn router(store: Shared, static_dir: Option<PathBuf>) -> Router {
    let maps = ServeDir::new(store.data_dir().join(MAPS_DIR));
    let api = Router::new()
        .route("/api/queue", get(queue))
        .route("/api/frames/{id}/image", get(frame_image))
        .route("/api/frames/{id}/annotations", get(get_annotations).put(put_annotations))
        .route("/api/frames/{id}/predictions", get(get_predictions))
        .route("/api/recompute", post(recompute))
        .route("/api/jobs/{id}", get(job))
        .nest_service(&format!("/{MAPS_DIR}"), maps)
        .with_state(store);
    let app = match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    };
    app.layer(CorsLayer::permissive())
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        source: std::io::Error,
    },
    #[error("loading data: {0}")]
    Load(#[from] StoreError),
    #[error("server: {0}")]
    Io(#[from] std::io::Error),
}

/// Serve `data_dir` on `port` until the process is stopped. Requests are
/// answered with 503 until the initial load finishes; a failed load stops
/// the server.
pub async fn serve(
    data_dir: PathBuf,
    port: u16,
    config: RunConfig,
    predictor: Arc<dyn Predictor>,
    static_dir: Option<PathBuf>,
) -> Result<(), ServeError> {
    let store = Arc::new(SessionStore::new(data_dir, config, predictor));
    let app = router(Arc::clone(&store), static_dir);
    let addr = SocketAddr::from(([0, 0, 0, 0], port));
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|source| ServeError::Bind { addr, source })?;
    tracing::info!("listening on http://{}", listener.local_addr()?);

    let loader = Arc::clone(&store);
    let load = tokio::task::spawn_blocking(move || loader.load());
    let server = std::future::IntoFuture::into_future(axum::serve(listener, app));
    tokio::pin!(server);
    tokio::select! {
        r = &mut server => return Ok(r?),
        loaded = load => {
            loaded.map_err(|e| std::io::Error::other(e.to_string()))??;
            tracing::info!("data loaded");
        }
    }
    Ok(server.await?)
}
