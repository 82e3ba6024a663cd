//! JSON HTTP API over a [`Study`].

use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use crate::error::StudyError;
use crate::model::{CasePayload, Round, StudyResponse, Tier};
use crate::report::study_report;
use crate::store::Study;

pub struct AppState {
    study: Mutex<Study>,
    image_root: Option<PathBuf>,
}

impl AppState {
    /// `image_root` resolves case image refs that name files.
    pub fn new(study: Study, image_root: Option<PathBuf>) -> Arc<Self> {
        Arc::new(Self {
            study: Mutex::new(study),
            image_root,
        })
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Study> {
        self.study.lock().unwrap_or_else(|p| p.into_inner())
    }
}

impl IntoResponse for StudyError {
    fn into_response(self) -> Response {
        let status = match &self {
            StudyError::Validation(_) => StatusCode::UNPROCESSABLE_ENTITY,
            StudyError::NotFound(_) => StatusCode::NOT_FOUND,
            StudyError::Conflict(_) => StatusCode::CONFLICT,
            StudyError::Protocol(_) | StudyError::NoCompletedReaders => StatusCode::PRECONDITION_FAILED,
            StudyError::CorruptLog { .. } | StudyError::Io { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(serde_json::json!({ "error": self.to_string() }))).into_response()
    }
}

#[derive(Debug, Deserialize)]
pub struct SessionQuery {
    pub tier: Option<Tier>,
    pub seed: Option<u64>,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub reader: String,
    pub round: Round,
    pub tier: Tier,
    pub answered: usize,
    pub total: usize,
    pub complete: bool,
    /// Next case to answer; absent once the round is complete.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub case: Option<CasePayload>,
}

async fn session(
    State(state): State<Arc<AppState>>,
    UrlPath((reader, round)): UrlPath<(String, u8)>,
    Query(q): Query<SessionQuery>,
) -> Result<Json<SessionView>, StudyError> {
    let round = Round::try_from(round)?;
    let mut study = state.lock();
    let session = study.open_session(&reader, round, q.tier, q.seed)?;
    let case = study.next_case(&reader, round)?;
    Ok(Json(SessionView {
        answered: study.answered(&reader, round),
        total: study.cases().len(),
        complete: case.is_none(),
        reader,
        round,
        tier: session.tier,
        case,
    }))
}

async fn respond(
    State(state): State<Arc<AppState>>,
    Json(response): Json<StudyResponse>,
) -> Result<impl IntoResponse, StudyError> {
    state.lock().submit(response)?;
    Ok((StatusCode::CREATED, Json(serde_json::json!({ "status": "recorded" }))))
}

async fn report(State(state): State<Arc<AppState>>) -> Result<impl IntoResponse, StudyError> {
    let report = study_report(&state.lock())?;
    Ok(([(header::CONTENT_TYPE, "application/json")], report.to_json()))
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("svg") => "image/svg+xml",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        _ => "application/octet-stream",
    }
}

fn placeholder(id: &str) -> String {
    let label: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_. ".contains(c) { c } else { '?' })
        .collect();
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"256\" height=\"256\">\
<rect width=\"256\" height=\"256\" fill=\"#202020\"/>\
<circle cx=\"128\" cy=\"128\" r=\"100\" fill=\"#8a3b12\"/>\
<text x=\"128\" y=\"134\" font-size=\"16\" fill=\"#ffffff\" text-anchor=\"middle\">{label}</text></svg>"
    )
}

fn is_plain_relative(p: &Path) -> bool {
    p.components().all(|c| matches!(c, Component::Normal(_)))
}

/// Serves an image referenced by some case: the file under the image root
/// when one exists, otherwise a placeholder SVG.
async fn image(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Response, StudyError> {
    let known = state.lock().cases().iter().any(|c| c.image == id);
    if !known {
        return Err(StudyError::NotFound(format!("no case references image {id}")));
    }
    let rel = Path::new(&id);
    if let Some(root) = &state.image_root {
        let path = root.join(rel);
        if is_plain_relative(rel) && path.is_file() {
            let bytes = tokio::fs::read(&path).await.map_err(|e| StudyError::io(&path, e))?;
            return Ok(([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response());
        }
    }
    Ok(([(header::CONTENT_TYPE, "image/svg+xml")], placeholder(&id)).into_response())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/session/{reader}/{round}", get(session))
        .route("/response", post(respond))
        .route("/report", get(report))
        .route("/image/{id}", get(image))
        .with_state(state)
}

/// Serves until Ctrl-C.
pub async fn serve(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("study service listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
