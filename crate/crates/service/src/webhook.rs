use std::time::Duration;

use adaptcat_core::engine::{Disposition, SessionResult};
use chrono::{DateTime, SecondsFormat};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WebhookPolicy {
    pub max_attempts: u32,
    /// Delay before the second attempt; it doubles after each failure.
    pub backoff: Duration,
    pub timeout: Duration,
}

impl Default for WebhookPolicy {
    fn default() -> Self {
        WebhookPolicy {
            max_attempts: 5,
            backoff: Duration::from_millis(500),
            timeout: Duration::from_secs(10),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeliveryStatus {
    Pending,
    Delivered,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WebhookDelivery {
    pub session_id: String,
    pub target: String,
    pub payload: Value,
    pub attempts: u32,
    pub status: DeliveryStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_error: Option<String>,
}

fn rfc3339(ms: u64) -> Option<String> {
    let ms = i64::try_from(ms).ok()?;
    DateTime::from_timestamp_millis(ms).map(|t| t.to_rfc3339_opts(SecondsFormat::Millis, true))
}

/// The export record posted for a closed session. Field names follow the
/// usual survey-platform import columns.
pub fn webhook_payload(study_id: &str, result: &SessionResult) -> Value {
    let est = result.final_estimate;
    json!({
        "record_id": result.session_id,
        "session_id": result.session_id,
        "study_id": study_id,
        "disposition": match result.disposition {
            Disposition::Completed => "completed",
            Disposition::Expired => "expired",
        },
        "theta_estimate": est.map(|e| e.theta),
        "se_estimate": est.map(|e| e.se),
        "estimation_method": est.map(|e| e.method),
        "items_administered": result.items_administered,
        "stop_reason": result.stop_reason,
        "classification": result.classification,
        "start_time": rfc3339(result.started_ms),
        "completion_time": rfc3339(result.ended_ms),
        "duration_ms": result.duration_ms,
        "duration_seconds": result.duration_ms as f64 / 1000.0,
    })
}

/// Posts `payload` until it is accepted, rejected with a 4xx status, or the
/// attempt budget runs out. `observe` sees the record after every attempt.
pub async fn deliver(
    client: &reqwest::Client,
    policy: WebhookPolicy,
    mut delivery: WebhookDelivery,
    mut observe: impl FnMut(&WebhookDelivery),
) -> WebhookDelivery {
    let mut delay = policy.backoff;
    while delivery.attempts < policy.max_attempts.max(1) {
        if delivery.attempts > 0 {
            tokio::time::sleep(delay).await;
            delay = delay.saturating_mul(2);
        }
        delivery.attempts += 1;
        let sent = client
            .post(&delivery.target)
            .timeout(policy.timeout)
            .json(&delivery.payload)
            .send()
            .await;
        match sent {
            Ok(resp) if resp.status().is_success() => {
                delivery.status = DeliveryStatus::Delivered;
                delivery.last_error = None;
            }
            Ok(resp) if resp.status().is_client_error() => {
                delivery.status = DeliveryStatus::Failed;
                delivery.last_error = Some(format!("rejected with {}", resp.status()));
            }
            Ok(resp) => delivery.last_error = Some(format!("server answered {}", resp.status())),
            Err(e) => delivery.last_error = Some(e.to_string()),
        }
        observe(&delivery);
        if delivery.status != DeliveryStatus::Pending {
            return delivery;
        }
    }
    delivery.status = DeliveryStatus::Failed;
    observe(&delivery);
    delivery
}
