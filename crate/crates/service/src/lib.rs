//! HTTP session service for live adaptive administration.
//!
//! | Method | Path | |
//! |---|---|---|
//! | `POST` | `/studies` | register a study; returns its id and operator token |
//! | `GET` | `/studies/{id}` | operator summary (bearer token) |
//! | `GET` | `/studies/{id}/results` | operator export of closed sessions |
//! | `POST` | `/studies/{id}/sessions` | start a session |
//! | `POST` | `/sessions/{id}/demographics` | submit the demographics form |
//! | `GET` | `/sessions/{id}/next` | outstanding item (idempotent) |
//! | `POST` | `/sessions/{id}/responses` | answer the outstanding item |
//! | `GET` | `/sessions/{id}/result` | result document once closed |
//! | `GET` | `/healthz` | liveness |
//!
//! Errors are `{"error": {"code", "message", "details"}}`.

mod api;
mod error;
mod service;
mod store;
mod webhook;

use std::future::Future;

pub use api::router;
pub use error::ApiError;
pub use service::{
    system_clock, BankInfo, BankRef, Clock, CreateSession, CreateStudy, ExposureView, Health, ItemView, Progress,
    ProgressSnapshot, ResponseBody, ResponseSchema, Service, ServiceConfig, ServiceError, SessionCreated, Step,
    StudyCreated, StudySummary, DEMO_BANK, DEMO_BANK_ITEMS, DEMO_BANK_SEED,
};
pub use store::ClientMeta;
pub use webhook::{deliver, webhook_payload, DeliveryStatus, WebhookDelivery, WebhookPolicy};

/// Serves the API on `listener` until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    service: Service,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(service))
        .with_graceful_shutdown(shutdown)
        .await
}
