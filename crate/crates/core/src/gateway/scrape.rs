//! Pull side of the gateway: periodically fetches exposition text from
//! configured targets and feeds it through the same ingest path as pushes.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tokio::task::JoinHandle;

use super::{Gateway, GatewayError, IngestContext, IngestReport};
use crate::clock::now_ms;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScrapeTarget {
    pub url: String,
    #[serde(default = "default_interval")]
    pub interval_seconds: u64,
    /// Merged into every scraped sample; the sample's own labels win.
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
}

fn default_interval() -> u64 {
    15
}

impl ScrapeTarget {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.url.trim().is_empty() {
            return Err(GatewayError::InvalidTarget("url is empty".into()));
        }
        if self.interval_seconds < 1 {
            return Err(GatewayError::InvalidTarget(format!("{}: interval must be at least 1 s", self.url)));
        }
        Ok(())
    }
}

/// Fetches one target and ingests the body.
pub async fn scrape_once(
    client: &reqwest::Client,
    target: &ScrapeTarget,
    gateway: &Gateway,
    now: i64,
) -> Result<IngestReport, reqwest::Error> {
    let body = client
        .get(&target.url)
        .timeout(Duration::from_secs(target.interval_seconds.clamp(1, 30)))
        .send()
        .await?
        .error_for_status()?
        .text()
        .await?;
    let ctx = IngestContext {
        source_labels: target.labels.clone(),
        scope: Vec::new(),
        now,
    };
    Ok(gateway.ingest(&body, &ctx))
}

/// Spawns one scrape loop per target. Failures are logged and counted
/// in `gateway_scrape_failures_total`; the loop keeps going.
pub fn spawn_scrapers(gateway: Arc<Gateway>, targets: Vec<ScrapeTarget>) -> Vec<JoinHandle<()>> {
    let client = reqwest::Client::new();
    targets
        .into_iter()
        .filter(|t| match t.validate() {
            Ok(()) => true,
            Err(e) => {
                tracing::warn!(error = %e, "skipping scrape target");
                false
            }
        })
        .map(|target| {
            let gateway = gateway.clone();
            let client = client.clone();
            tokio::spawn(async move {
                let mut ticker = tokio::time::interval(Duration::from_secs(target.interval_seconds));
                ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
                loop {
                    ticker.tick().await;
                    match scrape_once(&client, &target, &gateway, now_ms()).await {
                        Ok(report) if !report.rejected.is_empty() => {
                            tracing::warn!(url = %target.url, rejected = report.rejected.len(), "scrape had rejects")
                        }
                        Ok(_) => {}
                        Err(e) => {
                            gateway.metrics().inc("gateway_scrape_failures_total", 1);
                            tracing::warn!(url = %target.url, error = %e, "scrape failed");
                        }
                    }
                }
            })
        })
        .collect()
}
