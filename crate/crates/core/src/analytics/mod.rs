//! Processing layer: anomaly detection, correlation, root-cause ranking and
//! the gather/distill/clear maintenance cycle.

mod anomaly;
mod correlate;

use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use anomaly::{detect_spans, median, robust_zscore, score_points, AnomalyParams, AnomalySpan};
pub use correlate::{align_buckets, pearson};

use crate::clock::{align_down, MINUTE_MS};
use crate::metastore::{EventRecord, Metastore, SummaryRecord, SummaryStats, Window};
use crate::model::SeriesKey;
use crate::selector::Selector;
use crate::tsdb::{Aggregation, Tsdb, TsdbError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalyticsError {
    #[error("window of {0} points is too small (need at least 8)")]
    WindowTooSmall(usize),
    #[error("insufficient data: {have} points, need {need}")]
    InsufficientData { have: usize, need: usize },
    #[error("only {0} common buckets, need at least 3")]
    InsufficientOverlap(usize),
    #[error("series is constant over the window")]
    ZeroVariance,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Storage(#[from] TsdbError),
    #[error("cycle aborted after {0:?}")]
    Aborted(CyclePhase),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CyclePhase {
    Gather,
    Distill,
    Clear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyticsSettings {
    pub cycle_interval_seconds: u64,
    pub anomaly: AnomalyParams,
}

impl Default for AnalyticsSettings {
    fn default() -> Self {
        AnalyticsSettings {
            cycle_interval_seconds: 300,
            anomaly: AnomalyParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleReport {
    pub series_distilled: usize,
    pub summaries_written: usize,
    pub raw_cleared: usize,
    pub rollups_cleared: usize,
}

pub const RETENTION_BLOCKED_EVENT: &str = "tsdb_retention_blocked";

#[derive(Debug)]
pub struct Analytics {
    tsdb: Arc<Tsdb>,
    metastore: Option<Arc<Metastore>>,
    settings: AnalyticsSettings,
    cycle_lock: Mutex<()>,
    abort_after: Mutex<Option<CyclePhase>>,
}

impl Analytics {
    pub fn new(tsdb: Arc<Tsdb>, metastore: Option<Arc<Metastore>>, settings: AnalyticsSettings) -> Result<Self, AnalyticsError> {
        settings.anomaly.validate()?;
        Ok(Analytics {
            tsdb,
            metastore,
            settings,
            cycle_lock: Mutex::new(()),
            abort_after: Mutex::new(None),
        })
    }

    pub fn settings(&self) -> &AnalyticsSettings {
        &self.settings
    }

    pub fn tsdb(&self) -> &Arc<Tsdb> {
        &self.tsdb
    }

    /// Makes the next cycle stop right after `phase`, as if the process
    /// died there. Used for crash-safety tests.
    pub fn abort_next_cycle_after(&self, phase: CyclePhase) {
        *self.abort_after.lock() = Some(phase);
    }

    fn check_abort(&self, phase: CyclePhase) -> Result<(), AnalyticsError> {
        let mut hook = self.abort_after.lock();
        if *hook == Some(phase) {
            *hook = None;
            return Err(AnalyticsError::Aborted(phase));
        }
        Ok(())
    }

    /// Spans over the raw points of `key` in `[start, end)`.
    pub fn detect_anomalies(&self, key: &SeriesKey, start: i64, end: i64, params: &AnomalyParams) -> Result<Vec<AnomalySpan>, AnalyticsError> {
        let points = self.tsdb.raw_points(key, start, end);
        detect_spans(key, &points, params)
    }

    /// Pearson correlation of bucket means of two series.
    pub fn correlate(&self, a: &SeriesKey, b: &SeriesKey, start: i64, end: i64, step: i64) -> Result<f64, AnalyticsError> {
        let means = |k: &SeriesKey| -> Result<Vec<(i64, f64)>, AnalyticsError> {
            Ok(self
                .tsdb
                .query_range(&Selector::exact(k), start, end, step, Aggregation::Mean)?
                .into_iter()
                .find(|r| &r.key == k)
                .map(|r| r.points)
                .unwrap_or_default())
        };
        let (xs, ys) = align_buckets(&means(a)?, &means(b)?);
        pearson(&xs, &ys)
    }

    /// Ranks anomalous candidates by `|r| * (1 + lead / window_len)`, where
    /// lead is how much earlier the candidate's anomaly began. Candidates
    /// without an anomaly in the window are left out.
    pub fn rank_root_causes(
        &self,
        target: &AnomalySpan,
        candidates: &[SeriesKey],
        start: i64,
        end: i64,
        step: i64,
    ) -> Vec<(SeriesKey, f64)> {
        let window_len = (end - start).max(1) as f64;
        let mut scored: Vec<(SeriesKey, f64, i64)> = Vec::new();
        for cand in candidates {
            if cand == &target.key {
                continue;
            }
            let onset = match self.detect_anomalies(cand, start, end, &self.settings.anomaly) {
                Ok(spans) => match spans.iter().map(|s| s.onset).min() {
                    Some(o) => o,
                    None => continue,
                },
                Err(e) => {
                    tracing::debug!(candidate = %cand, error = %e, "candidate skipped");
                    continue;
                }
            };
            let r = self.correlate(&target.key, cand, start, end, step).unwrap_or(0.0);
            let lead = (target.onset - onset).max(0) as f64;
            scored.push((cand.clone(), r.abs() * (1.0 + lead / window_len), onset));
        }
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.2.cmp(&b.2)).then_with(|| a.0.cmp(&b.0)));
        scored.into_iter().map(|(k, s, _)| (k, s)).collect()
    }

    /// Gather, distill, clear. Raw data within one cycle interval of
    /// expiring is distilled into 1 m rollups plus one summary per series,
    /// then retention runs. Only one cycle runs at a time.
    pub fn distill_cycle(&self, now: i64) -> Result<CycleReport, AnalyticsError> {
        let _guard = self.cycle_lock.lock();
        let mut report = CycleReport::default();
        let lead = self.settings.cycle_interval_seconds as i64 * 1000;
        let horizon = align_down(now - self.tsdb.policy().raw_ms + lead, MINUTE_MS);

        let pending = self.tsdb.series_pending_distill(horizon);
        self.check_abort(CyclePhase::Gather)?;

        for key in &pending {
            let outcome = match self.tsdb.distill_series(key, horizon) {
                Ok(Some(o)) => o,
                Ok(None) => continue,
                Err(e) => {
                    tracing::warn!(series = %key, error = %e, "distill failed");
                    continue;
                }
            };
            let Some(total) = outcome.total() else { continue };
            report.series_distilled += 1;
            let Some(meta) = &self.metastore else { continue };
            let first = outcome.rollups.first().map_or(outcome.from, |r| r.window_start);
            let summary = SummaryRecord {
                summary_id: format!("{key}@{first}-{}", outcome.until),
                selector: key.to_string(),
                window: Window {
                    start: first,
                    end: outcome.until,
                },
                stats: SummaryStats::from_rollup(&total),
                produced_at: now,
            };
            match meta.store_summary(&summary) {
                Ok(()) => report.summaries_written += 1,
                Err(e) => tracing::warn!(series = %key, error = %e, "summary not stored"),
            }
        }
        self.check_abort(CyclePhase::Distill)?;

        let retention = self.tsdb.enforce_retention(now)?;
        report.raw_cleared = retention.raw_deleted;
        report.rollups_cleared = retention.rollups_deleted;
        if let Some(meta) = &self.metastore {
            let events: Vec<EventRecord> = retention
                .blocked
                .iter()
                .map(|k| EventRecord {
                    name: RETENTION_BLOCKED_EVENT.to_string(),
                    labels: std::iter::once(("series".to_string(), k.to_string())).collect(),
                    value: 1.0,
                    unit: "count".to_string(),
                    timestamp: now,
                })
                .collect();
            if !events.is_empty() {
                if let Err(e) = meta.record_events(&events) {
                    tracing::warn!(error = %e, "could not record blocked-retention events");
                }
            }
        }
        self.check_abort(CyclePhase::Clear)?;
        Ok(report)
    }

    /// Runs `distill_cycle` every cycle interval until the task is dropped.
    pub async fn run(self: Arc<Self>) {
        let period = std::time::Duration::from_secs(self.settings.cycle_interval_seconds.max(1));
        let mut ticker = tokio::time::interval(period);
        ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            ticker.tick().await;
            let this = self.clone();
            match tokio::task::spawn_blocking(move || this.distill_cycle(crate::clock::now_ms())).await {
                Ok(Ok(report)) => tracing::info!(?report, "distill cycle"),
                Ok(Err(e)) => tracing::warn!(error = %e, "distill cycle failed"),
                Err(e) => tracing::error!(error = %e, "distill cycle panicked"),
            }
        }
    }
}
