use std::collections::{BTreeMap, HashSet};
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::state::AlertState;
use crate::metrics::Registry;
use crate::retry::RetryPolicy;

pub const DELIVERED_TOTAL: &str = "alert_notifications_delivered_total";
pub const DROPPED_TOTAL: &str = "alert_notifications_dropped_total";
pub const SUPPRESSED_TOTAL: &str = "alert_notifications_suppressed_total";

/// Webhook body. Field order is the wire order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Notification {
    pub fingerprint: String,
    pub rule_id: String,
    pub state: AlertState,
    pub value: f64,
    pub labels: BTreeMap<String, String>,
    pub timestamp_ms: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "result", rename_all = "lowercase")]
pub enum DeliveryResult {
    Delivered { attempts: u32 },
    /// Already delivered (or in flight) for this episode and state.
    Suppressed,
    Dropped { attempts: u32, error: String },
}

type LedgerKey = (String, i64, AlertState);

/// Sends notifications with bounded retries, at most once per
/// (fingerprint, episode, state).
#[derive(Debug)]
pub struct Notifier {
    client: reqwest::Client,
    policy: RetryPolicy,
    ledger: Mutex<HashSet<LedgerKey>>,
    metrics: Registry,
}

impl Notifier {
    pub fn new(policy: RetryPolicy, metrics: Registry) -> Self {
        Notifier {
            client: reqwest::Client::builder()
                .timeout(Duration::from_secs(5))
                .build()
                .unwrap_or_default(),
            policy,
            ledger: Mutex::new(HashSet::new()),
            metrics,
        }
    }

    pub async fn deliver(&self, url: &str, episode_start: i64, n: &Notification) -> DeliveryResult {
        let key = (n.fingerprint.clone(), episode_start, n.state);
        if !self.ledger.lock().insert(key.clone()) {
            self.metrics.inc(SUPPRESSED_TOTAL, 1);
            return DeliveryResult::Suppressed;
        }
        let mut error = String::new();
        for attempt in 0..self.policy.attempts {
            match self.client.post(url).json(n).send().await {
                Ok(resp) if resp.status().is_success() => {
                    self.metrics.inc(DELIVERED_TOTAL, 1);
                    return DeliveryResult::Delivered { attempts: attempt + 1 };
                }
                Ok(resp) => error = format!("status {}", resp.status()),
                Err(e) => error = e.to_string(),
            }
            if attempt + 1 < self.policy.attempts {
                tokio::time::sleep(self.policy.delay_after(attempt)).await;
            }
        }
        // a dropped notification may be retried by a later evaluation
        self.ledger.lock().remove(&key);
        self.metrics.inc(DROPPED_TOTAL, 1);
        tracing::warn!(url, rule = %n.rule_id, state = %n.state, %error, "webhook dropped");
        DeliveryResult::Dropped {
            attempts: self.policy.attempts,
            error,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn body_key_order() {
        let n = Notification {
            fingerprint: "00000000000000ab".into(),
            rule_id: "cpu".into(),
            state: AlertState::Firing,
            value: 0.5,
            labels: BTreeMap::from([("host".to_string(), "n1".to_string())]),
            timestamp_ms: 7,
        };
        assert_eq!(
            serde_json::to_string(&n).unwrap(),
            r#"{"fingerprint":"00000000000000ab","rule_id":"cpu","state":"firing","value":0.5,"labels":{"host":"n1"},"timestamp_ms":7}"#
        );
    }
}
