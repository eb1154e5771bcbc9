use std::collections::BTreeMap;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::Value;

use crate::error::ApiError;
use crate::service::{CreateSession, CreateStudy, ResponseBody, Service};

pub fn router(service: Service) -> Router {
    Router::new()
        .route("/healthz", get(health))
        .route("/studies", post(create_study))
        .route("/studies/{id}", get(study_summary))
        .route("/studies/{id}/results", get(study_results))
        .route("/studies/{id}/sessions", post(create_session))
        .route("/sessions/{id}/demographics", post(demographics))
        .route("/sessions/{id}/next", get(next))
        .route("/sessions/{id}/responses", post(respond))
        .route("/sessions/{id}/result", get(result))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route") })
        .with_state(service)
}

fn bearer(headers: &HeaderMap) -> Option<&str> {
    headers
        .get(header::AUTHORIZATION)?
        .to_str()
        .ok()?
        .strip_prefix("Bearer ")
        .map(str::trim)
}

/// Adds a `Server-Timing` entry for the handler's own work.
fn timed(started: Instant, resp: impl IntoResponse) -> Response {
    let mut resp = resp.into_response();
    let ms = started.elapsed().as_secs_f64() * 1000.0;
    if let Ok(v) = HeaderValue::from_str(&format!("step;dur={ms:.3}")) {
        resp.headers_mut().insert("server-timing", v);
    }
    resp
}

async fn health(State(svc): State<Service>) -> impl IntoResponse {
    Json(svc.health())
}

async fn create_study(
    State(svc): State<Service>,
    body: Result<Json<CreateStudy>, JsonRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let Json(req) = body?;
    Ok((StatusCode::CREATED, Json(svc.create_study(req)?)))
}

async fn study_summary(
    State(svc): State<Service>,
    Path(id): Path<String>,
    headers: HeaderMap,
) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(svc.study_summary(&id, bearer(&headers))?))
}

async fn study_results(
    State(svc): State<Service>,
    Path(id): Path<String>,
    headers: HeaderMap,
) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(svc.study_results(&id, bearer(&headers))?))
}

/// The body is optional: an empty request starts a session with no
/// demographics and no client metadata.
async fn create_session(
    State(svc): State<Service>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<impl IntoResponse, ApiError> {
    let mut req: CreateSession = if body.iter().all(u8::is_ascii_whitespace) {
        CreateSession::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(e.to_string()))?
    };
    if req.client.user_agent.is_none() {
        req.client.user_agent = headers
            .get(header::USER_AGENT)
            .and_then(|v| v.to_str().ok())
            .map(str::to_string);
    }
    if req.client.language.is_none() {
        req.client.language = headers
            .get(header::ACCEPT_LANGUAGE)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.split(',').next())
            .map(|v| v.trim().to_string());
    }
    Ok((StatusCode::CREATED, Json(svc.create_session(&id, req)?)))
}

async fn demographics(
    State(svc): State<Service>,
    Path(id): Path<String>,
    body: Result<Json<BTreeMap<String, Value>>, JsonRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let Json(mut values) = body?;
    // accept both a bare map and {"demographics": {...}}
    if let (1, Some(Value::Object(inner))) = (values.len(), values.get("demographics")) {
        values = inner.clone().into_iter().collect();
    }
    Ok(Json(svc.submit_demographics(&id, values)?))
}

async fn next(State(svc): State<Service>, Path(id): Path<String>) -> Response {
    let started = Instant::now();
    timed(started, svc.next(&id).map(Json))
}

async fn respond(
    State(svc): State<Service>,
    Path(id): Path<String>,
    body: Result<Json<ResponseBody>, JsonRejection>,
) -> Response {
    let started = Instant::now();
    let out = body.map_err(ApiError::from).and_then(|Json(b)| svc.respond(&id, b));
    timed(started, out.map(Json))
}

async fn result(State(svc): State<Service>, Path(id): Path<String>, headers: HeaderMap) -> Result<Response, ApiError> {
    let body = svc.result(&id, bearer(&headers))?;
    Ok(([(header::CONTENT_TYPE, "application/json")], body).into_response())
}
