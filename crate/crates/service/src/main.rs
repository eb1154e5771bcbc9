use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

use adaptcat_service::{serve, Service, ServiceConfig, WebhookPolicy};
use anyhow::Context;
use clap::Parser;

/// Adaptive testing session service.
#[derive(Debug, Parser)]
#[command(version)]
struct Args {
    #[arg(long, env = "CAT_BIND", default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    /// Persist studies and sessions here; in-memory when unset.
    #[arg(long, env = "CAT_DATA_DIR")]
    data_dir: Option<PathBuf>,
    /// Directory of `<name>.csv` / `<name>.json` banks.
    #[arg(long, env = "CAT_BANK_DIR")]
    bank_dir: Option<PathBuf>,
    #[arg(long, env = "CAT_WEBHOOK_MAX_ATTEMPTS", default_value_t = 5)]
    webhook_max_attempts: u32,
    /// First retry delay; doubles per attempt.
    #[arg(long, env = "CAT_WEBHOOK_BACKOFF_MS", default_value_t = 500)]
    webhook_backoff_ms: u64,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    let args = Args::parse();
    let config = ServiceConfig {
        data_dir: args.data_dir,
        bank_dir: args.bank_dir,
        webhook: WebhookPolicy {
            max_attempts: args.webhook_max_attempts,
            backoff: Duration::from_millis(args.webhook_backoff_ms),
            ..WebhookPolicy::default()
        },
    };
    let service = Service::open(config).context("opening the data directory")?;
    let health = service.health();
    let listener = tokio::net::TcpListener::bind(args.bind)
        .await
        .with_context(|| format!("binding {}", args.bind))?;
    tracing::info!(
        addr = %listener.local_addr()?,
        studies = health.studies,
        sessions = health.sessions,
        "listening"
    );
    serve(listener, service, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await?;
    Ok(())
}
