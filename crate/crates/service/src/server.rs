//! HTTP annotation service: sessions over images in one directory, candidate
//! proposals from the classical pipeline, and ground-truth export.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, patch, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use virotem::classical::{propose_candidates, ProposalParams};
use virotem::raster::{encode_pgm, encode_png, mask_to_image, read_image, to_8bit, Circle, GrayImage};

use crate::session::{CirclePatch, Session, SessionCircle, SessionError};

#[derive(Debug, Clone)]
pub struct ServerConfig {
    /// Directory with the `.pgm` / `.png` images that sessions may open.
    pub image_dir: PathBuf,
    /// Where session snapshots live; `None` keeps sessions in memory only.
    pub snapshot_dir: Option<PathBuf>,
    /// Where exports are written.
    pub export_dir: PathBuf,
}

pub struct AppState {
    cfg: ServerConfig,
    images: RwLock<HashMap<String, Arc<GrayImage>>>,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    next_session: Mutex<u64>,
}

pub type SharedState = Arc<AppState>;

#[derive(Debug)]
pub enum ApiError {
    NotFound(String),
    BadRequest(String),
    Conflict(Session),
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match self {
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, json!({ "error": "not_found", "message": m })),
            ApiError::BadRequest(m) => (StatusCode::UNPROCESSABLE_ENTITY, json!({ "error": "invalid", "message": m })),
            ApiError::Conflict(s) => (
                StatusCode::CONFLICT,
                json!({ "error": "conflict", "message": format!("session is at revision {}", s.revision), "session": s }),
            ),
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": "internal", "message": m })),
        };
        (status, Json(body)).into_response()
    }
}

impl From<virotem::Error> for ApiError {
    fn from(e: virotem::Error) -> Self {
        match e {
            virotem::Error::Io { .. } | virotem::Error::Json(_) => ApiError::Internal(e.to_string()),
            other => ApiError::BadRequest(other.to_string()),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn session_error(e: SessionError, current: &Session) -> ApiError {
    match e {
        SessionError::Conflict { .. } => ApiError::Conflict(current.clone()),
        SessionError::UnknownCircle(_) => ApiError::NotFound(e.to_string()),
        SessionError::OutOfBounds(_) => ApiError::BadRequest(e.to_string()),
    }
}

/// Image ids are file stems; only plain names are accepted.
fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.')) && !id.starts_with('.')
}

impl AppState {
    /// Creates the state and reloads any session snapshots.
    pub fn new(cfg: ServerConfig) -> anyhow::Result<SharedState> {
        let mut sessions = HashMap::new();
        let mut max_id = 0;
        if let Some(dir) = &cfg.snapshot_dir {
            std::fs::create_dir_all(dir)?;
            for entry in std::fs::read_dir(dir)? {
                let path = entry?.path();
                if path.extension().and_then(|e| e.to_str()) != Some("json") {
                    continue;
                }
                let s: Session = serde_json::from_slice(&std::fs::read(&path)?)?;
                if let Some(n) = s.id.strip_prefix('s').and_then(|n| n.parse::<u64>().ok()) {
                    max_id = max_id.max(n);
                }
                sessions.insert(s.id.clone(), Arc::new(Mutex::new(s)));
            }
        }
        Ok(Arc::new(AppState {
            cfg,
            images: RwLock::new(HashMap::new()),
            sessions: RwLock::new(sessions),
            next_session: Mutex::new(max_id + 1),
        }))
    }

    fn image_path(&self, id: &str) -> Option<PathBuf> {
        if !valid_id(id) {
            return None;
        }
        ["pgm", "png"].iter().map(|ext| self.cfg.image_dir.join(format!("{id}.{ext}"))).find(|p| p.is_file())
    }

    fn image(&self, id: &str) -> ApiResult<Arc<GrayImage>> {
        if let Some(img) = self.images.read().expect("image cache lock").get(id) {
            return Ok(img.clone());
        }
        let path = self.image_path(id).ok_or_else(|| ApiError::NotFound(format!("no image {id:?}")))?;
        let img = Arc::new(read_image(&path)?);
        self.images.write().expect("image cache lock").insert(id.to_string(), img.clone());
        Ok(img)
    }

    fn session(&self, id: &str) -> ApiResult<Arc<Mutex<Session>>> {
        self.sessions
            .read()
            .expect("session table lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("no session {id:?}")))
    }

    fn snapshot(&self, s: &Session) -> ApiResult<()> {
        if let Some(dir) = &self.cfg.snapshot_dir {
            let bytes = serde_json::to_vec_pretty(s).map_err(|e| ApiError::Internal(e.to_string()))?;
            let tmp = dir.join(format!("{}.json.tmp", s.id));
            let path = dir.join(format!("{}.json", s.id));
            std::fs::write(&tmp, bytes)
                .and_then(|_| std::fs::rename(&tmp, &path))
                .map_err(|e| ApiError::Internal(format!("{}: {e}", path.display())))?;
        }
        Ok(())
    }

    /// Applies `f` under the session lock; snapshots on success.
    fn mutate<T>(
        &self,
        id: &str,
        f: impl FnOnce(&mut Session) -> Result<T, SessionError>,
    ) -> ApiResult<(T, Session)> {
        let cell = self.session(id)?;
        let mut s = cell.lock().expect("session lock");
        match f(&mut s) {
            Ok(v) => {
                self.snapshot(&s)?;
                Ok((v, s.clone()))
            }
            Err(e) => Err(session_error(e, &s)),
        }
    }
}

pub fn router(state: SharedState) -> Router {
    Router::new()
        .route("/images", get(list_images))
        .route("/images/{file}", get(get_image))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/propose", post(propose))
        .route("/sessions/{id}/circles", post(add_circle))
        .route("/sessions/{id}/circles/{cid}", patch(update_circle).delete(delete_circle))
        .route("/sessions/{id}/export", get(export))
        .with_state(state)
}

async fn list_images(State(st): State<SharedState>) -> ApiResult<Json<Vec<String>>> {
    let dir = &st.cfg.image_dir;
    let rd = std::fs::read_dir(dir).map_err(|e| ApiError::Internal(format!("{}: {e}", dir.display())))?;
    let mut ids: Vec<String> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "png")))
        .filter_map(|p| p.file_stem().and_then(|s| s.to_str()).map(str::to_string))
        .collect();
    ids.sort();
    ids.dedup();
    Ok(Json(ids))
}

/// `GET /images/{id}.png`: the image as 8-bit PNG.
async fn get_image(State(st): State<SharedState>, UrlPath(file): UrlPath<String>) -> ApiResult<Response> {
    let id = file.strip_suffix(".png").ok_or_else(|| ApiError::NotFound(format!("{file}: only .png is served")))?;
    let img = st.image(id)?;
    let bytes = encode_png(&to_8bit(&img))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

#[derive(Deserialize)]
struct CreateSession {
    image: String,
}

async fn create_session(
    State(st): State<SharedState>,
    Json(req): Json<CreateSession>,
) -> ApiResult<(StatusCode, Json<Session>)> {
    let img = st.image(&req.image)?;
    let id = {
        let mut n = st.next_session.lock().expect("session counter lock");
        let id = format!("s{}", *n);
        *n += 1;
        id
    };
    let s = Session::new(id.clone(), req.image, img.width(), img.height());
    st.snapshot(&s)?;
    st.sessions.write().expect("session table lock").insert(id, Arc::new(Mutex::new(s.clone())));
    tracing::info!(session = %s.id, image = %s.image, "session created");
    Ok((StatusCode::CREATED, Json(s)))
}

async fn get_session(State(st): State<SharedState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Session>> {
    let cell = st.session(&id)?;
    let s = cell.lock().expect("session lock").clone();
    Ok(Json(s))
}

#[derive(Deserialize)]
struct ProposeRequest {
    revision: u64,
    #[serde(default)]
    params: Option<ProposalParams>,
}

async fn propose(
    State(st): State<SharedState>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<ProposeRequest>,
) -> ApiResult<Json<Session>> {
    let image_id = {
        let cell = st.session(&id)?;
        let s = cell.lock().expect("session lock");
        if s.revision != req.revision {
            return Err(ApiError::Conflict(s.clone()));
        }
        s.image.clone()
    };
    let img = st.image(&image_id)?;
    let params = req.params.unwrap_or_default();
    let cands = tokio::task::spawn_blocking(move || propose_candidates(&to_8bit(&img), &params))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    tracing::info!(session = %id, n = cands.len(), "proposed candidates");
    let (_, s) = st.mutate(&id, |s| s.replace_auto(req.revision, &cands))?;
    Ok(Json(s))
}

#[derive(Deserialize)]
struct AddCircle {
    revision: u64,
    cx: f64,
    cy: f64,
    r: f64,
}

async fn add_circle(
    State(st): State<SharedState>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<AddCircle>,
) -> ApiResult<(StatusCode, Json<Session>)> {
    let (_, s) = st.mutate(&id, |s| s.add(req.revision, req.cx, req.cy, req.r))?;
    Ok((StatusCode::CREATED, Json(s)))
}

#[derive(Deserialize)]
struct UpdateCircle {
    revision: u64,
    #[serde(flatten)]
    patch: CirclePatch,
}

async fn update_circle(
    State(st): State<SharedState>,
    UrlPath((id, cid)): UrlPath<(String, u64)>,
    Json(req): Json<UpdateCircle>,
) -> ApiResult<Json<Session>> {
    let (_, s) = st.mutate(&id, |s| s.update(req.revision, cid, &req.patch))?;
    Ok(Json(s))
}

#[derive(Deserialize)]
struct Revision {
    revision: u64,
}

async fn delete_circle(
    State(st): State<SharedState>,
    UrlPath((id, cid)): UrlPath<(String, u64)>,
    Json(req): Json<Revision>,
) -> ApiResult<Json<Session>> {
    let (_, s) = st.mutate(&id, |s| s.delete(req.revision, cid))?;
    Ok(Json(s))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ExportResponse {
    pub revision: u64,
    pub mask_path: PathBuf,
    pub circles_path: PathBuf,
    pub circles: Vec<SessionCircle>,
}

/// Mask PGM and circle JSON lines of a session, in the corpus formats.
pub fn export_files(s: &Session, dir: &Path) -> anyhow::Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let mask_path = dir.join(format!("{}_mask.pgm", s.id));
    let circles_path = dir.join(format!("{}_circles.jsonl", s.id));
    std::fs::write(&mask_path, encode_pgm(&mask_to_image(&s.mask())))?;
    let circles: Vec<Circle> = s.plain_circles();
    virotem::synthgen::write_circles(&circles, &circles_path)?;
    Ok((mask_path, circles_path))
}

async fn export(State(st): State<SharedState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<ExportResponse>> {
    let cell = st.session(&id)?;
    let s = cell.lock().expect("session lock").clone();
    let (mask_path, circles_path) =
        export_files(&s, &st.cfg.export_dir).map_err(|e| ApiError::Internal(format!("{e:#}")))?;
    Ok(Json(ExportResponse { revision: s.revision, mask_path, circles_path, circles: s.circles }))
}

pub async fn serve(addr: &str, cfg: ServerConfig) -> anyhow::Result<()> {
    let state = AppState::new(cfg)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state)).await?;
    Ok(())
}
