//! HTTP job API.
//!
//! | method | path | result |
//! |---|---|---|
//! | POST | `/jobs` | multipart `image` (PNG) + `request` (JSON) → 202 and the job |
//! | GET | `/jobs` | all jobs, oldest first |
//! | GET | `/jobs/{id}` | job record |
//! | GET | `/jobs/{id}/artifacts/{name}` | bundle file; 409 until the job is done |
//! | GET | `/presets` | the service's base config |
//! | GET | `/healthz` | liveness |

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use moveact_core::pipeline::{EditRequestFields, BUNDLE_FILES};
use moveact_core::{Config, EditRequest, Error, RgbImage};
use serde_json::json;

use crate::jobs::{JobState, JobStore};

const MAX_UPLOAD_BYTES: usize = 32 * 1024 * 1024;

#[derive(Clone)]
pub struct AppState {
    pub store: JobStore,
    pub config: Arc<Config>,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/jobs", get(list_jobs).post(submit_job))
        .route("/jobs/{id}", get(get_job))
        .route("/jobs/{id}/artifacts/{*name}", get(get_artifact))
        .route("/presets", get(presets))
        .route("/healthz", get(healthz))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(state)
}

fn error(status: StatusCode, field: Option<&str>, message: impl Into<String>) -> Response {
    let mut body = json!({"error": message.into()});
    if let Some(f) = field {
        body["field"] = json!(f);
    }
    (status, Json(body)).into_response()
}

fn bad_request(e: &Error) -> Response {
    match e {
        Error::InvalidArgument { field, message } => error(StatusCode::BAD_REQUEST, Some(field), message.clone()),
        other => error(StatusCode::BAD_REQUEST, None, other.to_string()),
    }
}

async fn submit_job(State(state): State<AppState>, mut multipart: Multipart) -> Response {
    let mut image_bytes = None;
    let mut request_text = None;
    loop {
        match multipart.next_field().await {
            Ok(Some(field)) => {
                let name = field.name().unwrap_or_default().to_string();
                match name.as_str() {
                    "image" => match field.bytes().await {
                        Ok(b) => image_bytes = Some(b),
                        Err(e) => return error(StatusCode::BAD_REQUEST, Some("image"), e.body_text()),
                    },
                    "request" => match field.text().await {
                        Ok(t) => request_text = Some(t),
                        Err(e) => return error(StatusCode::BAD_REQUEST, Some("request"), e.body_text()),
                    },
                    _ => {}
                }
            }
            Ok(None) => break,
            Err(e) => return error(StatusCode::BAD_REQUEST, None, e.body_text()),
        }
    }
    let Some(bytes) = image_bytes else {
        return error(StatusCode::BAD_REQUEST, Some("image"), "missing multipart part `image`");
    };
    let Some(text) = request_text else {
        return error(StatusCode::BAD_REQUEST, Some("request"), "missing multipart part `request`");
    };
    let image = match RgbImage::decode_png(&bytes) {
        Ok(img) => img,
        Err(e) => return error(StatusCode::BAD_REQUEST, Some("image"), format!("not a PNG image: {e}")),
    };
    let fields: EditRequestFields = match serde_json::from_str(&text) {
        Ok(f) => f,
        Err(e) => return error(StatusCode::BAD_REQUEST, Some("request"), e.to_string()),
    };
    let request = EditRequest { image, fields };
    if let Err(e) = request.validate() {
        return bad_request(&e);
    }
    if let Err(e) = request.fields.resolve_config(&state.config) {
        return match e {
            Error::InvalidArgument { .. } => bad_request(&e),
            other => error(StatusCode::BAD_REQUEST, Some("overrides"), other.to_string()),
        };
    }
    let store = state.store.clone();
    let submitted = tokio::task::spawn_blocking(move || store.submit(&request.image, request.fields)).await;
    match submitted {
        Ok(Ok(job)) => {
            let location = format!("/jobs/{}", job.id);
            let mut resp = (StatusCode::ACCEPTED, Json(job)).into_response();
            if let Ok(v) = HeaderValue::from_str(&location) {
                resp.headers_mut().insert(header::LOCATION, v);
            }
            resp
        }
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, None, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, None, e.to_string()),
    }
}

async fn list_jobs(State(state): State<AppState>) -> Response {
    Json(state.store.list()).into_response()
}

async fn get_job(State(state): State<AppState>, Path(id): Path<String>) -> Response {
    match state.store.get(&id) {
        Some(job) => Json(job).into_response(),
        None => error(StatusCode::NOT_FOUND, None, format!("unknown job {id}")),
    }
}

fn content_type(name: &str) -> &'static str {
    match name.rsplit('.').next() {
        Some("png") => "image/png",
        Some("csv") => "text/csv",
        Some("json") => "application/json",
        _ => "application/octet-stream",
    }
}

async fn get_artifact(State(state): State<AppState>, Path((id, name)): Path<(String, String)>) -> Response {
    let Some(job) = state.store.get(&id) else {
        return error(StatusCode::NOT_FOUND, None, format!("unknown job {id}"));
    };
    if !BUNDLE_FILES.contains(&name.as_str()) {
        return error(StatusCode::NOT_FOUND, None, format!("unknown artifact {name}"));
    }
    if job.state != JobState::Done {
        let state_name = serde_json::to_value(job.state).unwrap_or_default();
        return error(
            StatusCode::CONFLICT,
            None,
            format!("job {id} is {}; artifacts are available once it is done", state_name.as_str().unwrap_or("?")),
        );
    }
    let path = state.store.run_dir(&id).join(&name);
    match std::fs::read(&path) {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(&name))], bytes).into_response(),
        Err(_) => error(StatusCode::NOT_FOUND, None, format!("artifact {name} is missing")),
    }
}

async fn presets(State(state): State<AppState>) -> Response {
    Json(state.config.as_ref().clone()).into_response()
}

async fn healthz(State(state): State<AppState>) -> Response {
    Json(json!({"status": "ok", "queued": state.store.queued()})).into_response()
}

/// Serves the API until Ctrl-C, then lets running jobs finish.
pub async fn serve(config: Config, addr: SocketAddr) -> moveact_core::Result<()> {
    let store = JobStore::open(&config.service.artifact_root)?;
    let pool = store.start_workers(&config)?;
    let app = router(AppState {
        store,
        config: Arc::new(config),
    });
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::io(addr.to_string(), e))?;
    log::info!("listening on http://{}", listener.local_addr().map_err(|e| Error::io(addr.to_string(), e))?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Error::io(addr.to_string(), e))?;
    tokio::task::spawn_blocking(move || pool.shutdown())
        .await
        .map_err(|e| Error::io("<worker pool>", std::io::Error::other(e)))?;
    Ok(())
}
