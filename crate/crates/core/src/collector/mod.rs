//! Collection layer: resource profiling, model-based energy estimation, and
//! delivery of the resulting samples by pull (`GET /metrics`) and push.
//!
//! Every batch the agent emits carries its own overhead counters
//! (`collector_cpu_seconds`, `collector_samples_total`) so the cost of
//! observing is itself observable.

mod power;
mod provider;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::http::header;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::Router;
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use power::{estimate_power, integrate_energy, PowerModel};
pub use provider::{ReplayProvider, ResourceSnapshot, SnapshotProvider, SystemProvider};

use crate::model::{format_exposition, CanonicalUnit, MetricSample, ModelError, SampleKind};
use crate::retry::RetryPolicy;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CollectorError {
    #[error("snapshot source unavailable: {0}")]
    SourceUnavailable(String),
    #[error("invalid snapshot: {0}")]
    InvalidSnapshot(String),
    #[error("utilization {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("invalid power model {0:?}")]
    InvalidPowerModel(PowerModel),
    #[error("need at least 2 power points, got {0}")]
    InsufficientPoints(usize),
    #[error("timestamps not strictly increasing: {previous} then {next}")]
    NonMonotonicTime { previous: i64, next: i64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("push failed after retries: {0}")]
    PushFailed(String),
}

pub const MIN_INTERVAL_SECONDS: u64 = 1;
pub const MAX_INTERVAL_SECONDS: u64 = 300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollectorSettings {
    pub interval_seconds: u64,
    pub host: String,
    pub power_model: PowerModel,
    pub push_url: Option<String>,
    pub listen_addr: String,
    /// JSON-lines snapshot file; replaces the live provider when set.
    pub replay_file: Option<String>,
    /// Process to observe; the collector itself when unset.
    pub pid: Option<u32>,
}

impl Default for CollectorSettings {
    fn default() -> Self {
        CollectorSettings {
            interval_seconds: 5,
            host: "localhost".into(),
            power_model: PowerModel::default(),
            push_url: None,
            listen_addr: "127.0.0.1:9101".into(),
            replay_file: None,
            pid: None,
        }
    }
}

impl CollectorSettings {
    pub fn interval(&self) -> Duration {
        Duration::from_secs(self.interval_seconds.clamp(MIN_INTERVAL_SECONDS, MAX_INTERVAL_SECONDS))
    }
}

/// Own-process overhead figures attached to every batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SelfMetering {
    pub cpu_seconds: f64,
    /// Samples emitted by earlier ticks.
    pub samples_total: u64,
}

/// Maps one snapshot to workload samples plus the collector's self-metrics.
/// All returned samples share the snapshot's timestamp.
pub fn resource_samples(
    snapshot: &ResourceSnapshot,
    host: &str,
    metering: SelfMetering,
) -> Result<Vec<MetricSample>, CollectorError> {
    let labels = [("host", host), ("collector", "self")];
    let ts = snapshot.timestamp;
    let sample = |name: &str, kind, unit, value| MetricSample::new(name, &labels, kind, unit, value, ts);
    Ok(vec![
        sample("cpu_utilization", SampleKind::Gauge, CanonicalUnit::Ratio, snapshot.cpu_utilization)?,
        sample("memory_used_bytes", SampleKind::Gauge, CanonicalUnit::Bytes, snapshot.memory_used)?,
        sample("process_cpu_seconds", SampleKind::Counter, CanonicalUnit::Seconds, snapshot.process_cpu_seconds)?,
        sample("collector_cpu_seconds", SampleKind::Counter, CanonicalUnit::Seconds, metering.cpu_seconds)?,
        sample(
            "collector_samples_total",
            SampleKind::Counter,
            CanonicalUnit::Count,
            metering.samples_total as f64,
        )?,
    ])
}

#[cfg(unix)]
fn own_cpu_seconds() -> f64 {
    // SAFETY: getrusage only writes into the zeroed struct we pass.
    unsafe {
        let mut usage: libc::rusage = std::mem::zeroed();
        if libc::getrusage(libc::RUSAGE_SELF, &mut usage) != 0 {
            return 0.0;
        }
        let tv = |t: libc::timeval| t.tv_sec as f64 + t.tv_usec as f64 / 1e6;
        tv(usage.ru_utime) + tv(usage.ru_stime)
    }
}

#[cfg(not(unix))]
fn own_cpu_seconds() -> f64 {
    0.0
}

/// Latest published batch; readers never observe a partially built batch.
pub type LatestBatch = Arc<RwLock<Arc<Vec<MetricSample>>>>;

/// The collection agent: one tick = one snapshot turned into a batch.
pub struct Collector {
    provider: Box<dyn SnapshotProvider>,
    settings: CollectorSettings,
    samples_total: u64,
    last_power: Option<(i64, f64)>,
    energy_joules: f64,
    latest: LatestBatch,
    dropped: Arc<AtomicU64>,
}

impl Collector {
    pub fn new(provider: Box<dyn SnapshotProvider>, settings: CollectorSettings) -> Result<Self, CollectorError> {
        settings.power_model.validate()?;
        Ok(Collector {
            provider,
            settings,
            samples_total: 0,
            last_power: None,
            energy_joules: 0.0,
            latest: Arc::new(RwLock::new(Arc::new(Vec::new()))),
            dropped: Arc::new(AtomicU64::new(0)),
        })
    }

    pub fn settings(&self) -> &CollectorSettings {
        &self.settings
    }

    pub fn latest(&self) -> LatestBatch {
        self.latest.clone()
    }

    pub fn dropped_counter(&self) -> Arc<AtomicU64> {
        self.dropped.clone()
    }

    /// Snapshot plus workload and self-metering samples. Provider failures
    /// surface as [`CollectorError::SourceUnavailable`] and emit nothing.
    pub fn sample_resources(&mut self) -> Result<(ResourceSnapshot, Vec<MetricSample>), CollectorError> {
        let snapshot = self.provider.snapshot()?;
        snapshot.validate()?;
        let samples = resource_samples(
            &snapshot,
            &self.settings.host,
            SelfMetering {
                cpu_seconds: own_cpu_seconds(),
                samples_total: self.samples_total,
            },
        )?;
        Ok((snapshot, samples))
    }

    /// Runs one sampling tick and publishes the batch. On provider failure
    /// the previous batch stays published.
    pub fn tick(&mut self) -> Result<Arc<Vec<MetricSample>>, CollectorError> {
        let (snapshot, mut batch) = self.sample_resources()?;
        let labels = [("host", self.settings.host.as_str()), ("collector", "self")];
        let ts = snapshot.timestamp;
        match estimate_power(snapshot.normalized_utilization().min(1.0), &self.settings.power_model) {
            Ok(watts) => {
                if let Some(prev) = self.last_power {
                    match integrate_energy(&[prev, (ts, watts)]) {
                        Ok(j) => self.energy_joules += j,
                        Err(e) => tracing::warn!(error = %e, "skipping energy integration step"),
                    }
                }
                if self.last_power.is_none_or(|(t, _)| ts > t) {
                    self.last_power = Some((ts, watts));
                }
                batch.push(MetricSample::new(
                    "estimated_power_watts",
                    &labels,
                    SampleKind::Gauge,
                    CanonicalUnit::Watts,
                    watts,
                    ts,
                )?);
                batch.push(MetricSample::new(
                    "estimated_energy_joules",
                    &labels,
                    SampleKind::Counter,
                    CanonicalUnit::Joules,
                    self.energy_joules,
                    ts,
                )?);
            }
            Err(e) => tracing::warn!(error = %e, "power estimate skipped"),
        }
        self.samples_total += batch.len() as u64;
        let batch = Arc::new(batch);
        *self.latest.write() = batch.clone();
        Ok(batch)
    }

    pub fn energy_joules(&self) -> f64 {
        self.energy_joules
    }
}

/// Exposition text served on pull: the latest batch plus the drop counter.
pub fn render_pull(latest: &LatestBatch, dropped: &AtomicU64) -> String {
    let batch = latest.read().clone();
    let mut text = format_exposition(batch.iter());
    if let Some(first) = batch.first() {
        let labels: Vec<(&str, &str)> = first.key.labels().iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
        if let Ok(s) = MetricSample::new(
            "collector_dropped_total",
            &labels,
            SampleKind::Counter,
            CanonicalUnit::Count,
            dropped.load(Ordering::Relaxed) as f64,
            first.timestamp,
        ) {
            text.push_str(&s.to_line());
            text.push('\n');
        }
    }
    text
}

#[derive(Clone)]
struct PullState {
    latest: LatestBatch,
    dropped: Arc<AtomicU64>,
}

/// Router serving `GET /metrics`.
pub fn pull_router(latest: LatestBatch, dropped: Arc<AtomicU64>) -> Router {
    async fn metrics(State(state): State<PullState>) -> impl IntoResponse {
        (
            [(header::CONTENT_TYPE, "text/plain; charset=utf-8")],
            render_pull(&state.latest, &state.dropped),
        )
    }
    Router::new()
        .route("/metrics", get(metrics))
        .with_state(PullState { latest, dropped })
}

/// POSTs a batch to the gateway with bounded backoff. When every attempt
/// fails the batch is dropped and `dropped` grows by its sample count.
pub async fn push_batch(
    client: &reqwest::Client,
    url: &str,
    token: Option<&str>,
    batch: &[MetricSample],
    policy: RetryPolicy,
    dropped: &AtomicU64,
) -> Result<(), CollectorError> {
    let body = format_exposition(batch.iter());
    let mut last_error = String::new();
    for attempt in 0..policy.attempts {
        let mut req = client.post(url).body(body.clone());
        if let Some(t) = token {
            req = req.bearer_auth(t);
        }
        match req.send().await {
            Ok(resp) if resp.status().is_success() => return Ok(()),
            Ok(resp) => last_error = format!("status {}", resp.status()),
            Err(e) => last_error = e.to_string(),
        }
        if attempt + 1 < policy.attempts {
            tokio::time::sleep(policy.delay_after(attempt)).await;
        }
    }
    dropped.fetch_add(batch.len() as u64, Ordering::Relaxed);
    tracing::warn!(url, error = %last_error, samples = batch.len(), "push dropped");
    Err(CollectorError::PushFailed(last_error))
}

/// Periodic sampling loop. Runs until the task is cancelled.
pub async fn run(mut collector: Collector, push_token: Option<String>, policy: RetryPolicy) {
    let client = reqwest::Client::new();
    let mut ticker = tokio::time::interval(collector.settings().interval());
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
    loop {
        ticker.tick().await;
        let batch = match collector.tick() {
            Ok(b) => b,
            Err(e) => {
                tracing::warn!(error = %e, "collector tick skipped");
                continue;
            }
        };
        if let Some(url) = collector.settings().push_url.clone() {
            let _ = push_batch(&client, &url, push_token.as_deref(), &batch, policy, &collector.dropped).await;
        }
    }
}
