//! Ingest gateway: normalizes pushed and scraped exposition text, repairs
//! counter resets, strips sensitive labels and routes samples to storage.

mod counter;
pub mod scrape;

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use counter::{adjust_counter, CounterState, CounterTracker};
pub use scrape::ScrapeTarget;

use crate::metastore::{EventRecord, Metastore};
use crate::metrics::Registry;
use crate::model::{canonicalize_series_key, parse_exposition_line, MetricSample, ModelError, ParsedLine, SampleKind};
use crate::tsdb::{AppendOutcome, Tsdb, TsdbError};

pub const SANITIZED_TOTAL: &str = "gateway_sanitized_total";
pub const ACCEPTED_TOTAL: &str = "gateway_accepted_total";
pub const REJECTED_TOTAL: &str = "gateway_rejected_total";
pub const DUPLICATES_TOTAL: &str = "gateway_duplicates_total";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GatewayError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("negative counter value {0}")]
    NegativeCounter(f64),
    #[error("timestamp {timestamp} is more than {tolerance_ms} ms in the future")]
    FutureTimestamp { timestamp: i64, tolerance_ms: i64 },
    #[error("timestamp {timestamp} is older than the retention cutoff {cutoff}")]
    TooOld { timestamp: i64, cutoff: i64 },
    #[error("label `{key}` conflicts with the caller's scope")]
    ScopeConflict { key: String },
    #[error("no {0} store is configured")]
    NoStore(&'static str),
    #[error(transparent)]
    Storage(#[from] TsdbError),
    #[error("metastore: {0}")]
    Metastore(String),
    #[error("invalid scrape target: {0}")]
    InvalidTarget(String),
}

impl GatewayError {
    /// Short stable name of the error kind, returned to pushers.
    pub fn code(&self) -> &'static str {
        match self {
            GatewayError::Model(m) => match m {
                ModelError::InvalidName(_) => "InvalidName",
                ModelError::InvalidLabelKey(_) => "InvalidLabelKey",
                ModelError::TooManyLabels(_) => "TooManyLabels",
                ModelError::UnknownUnit(_) => "UnknownUnit",
                ModelError::InvalidValue(_) => "InvalidValue",
                ModelError::ParseError(_) => "ParseError",
            },
            GatewayError::NegativeCounter(_) => "NegativeCounter",
            GatewayError::FutureTimestamp { .. } => "FutureTimestamp",
            GatewayError::TooOld { .. } => "RetentionViolation",
            GatewayError::ScopeConflict { .. } => "ScopeConflict",
            GatewayError::NoStore(_) => "NoStore",
            GatewayError::Storage(TsdbError::RetentionViolation { .. }) => "RetentionViolation",
            GatewayError::Storage(TsdbError::StorageFull(_)) => "StorageFull",
            GatewayError::Storage(_) => "StorageError",
            GatewayError::Metastore(_) => "StorageError",
            GatewayError::InvalidTarget(_) => "InvalidTarget",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewaySettings {
    /// Label keys dropped from every sample.
    pub sanitize_labels: Vec<String>,
    pub future_tolerance_seconds: i64,
    pub scrape_targets: Vec<ScrapeTarget>,
}

impl Default for GatewaySettings {
    fn default() -> Self {
        GatewaySettings {
            sanitize_labels: vec!["email".into(), "ip".into(), "user_name".into()],
            future_tolerance_seconds: 300,
            scrape_targets: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Destination {
    Tsdb,
    Metastore,
}

/// Gauges and counters are time series; events are contextual records.
pub fn route_record(sample: &MetricSample) -> Destination {
    match sample.kind {
        SampleKind::Gauge | SampleKind::Counter => Destination::Tsdb,
        SampleKind::Event => Destination::Metastore,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub line: String,
    pub error: String,
    pub code: String,
}

impl Reject {
    fn new(line: &str, err: &GatewayError) -> Self {
        Reject {
            line: line.to_string(),
            error: err.to_string(),
            code: err.code().to_string(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NormalizedBatch {
    pub accepted: Vec<MetricSample>,
    pub rejects: Vec<Reject>,
}

/// Parses every line, merges `source_labels` underneath the sample's own
/// labels and drops denylisted keys. Bad lines end up in `rejects`; they
/// never abort the batch.
pub fn normalize_batch(
    raw: &str,
    source_labels: &BTreeMap<String, String>,
    denylist: &HashSet<String>,
    metrics: &Registry,
) -> NormalizedBatch {
    let mut out = NormalizedBatch::default();
    let mut sanitized = 0u64;
    for line in raw.lines() {
        match normalize_line(line, source_labels, denylist, &mut sanitized) {
            Ok(Some(sample)) => out.accepted.push(sample),
            Ok(None) => {}
            Err(e) => out.rejects.push(Reject::new(line, &e)),
        }
    }
    if sanitized > 0 {
        metrics.inc(SANITIZED_TOTAL, sanitized);
    }
    out
}

fn normalize_line(
    line: &str,
    source_labels: &BTreeMap<String, String>,
    denylist: &HashSet<String>,
    sanitized: &mut u64,
) -> Result<Option<MetricSample>, GatewayError> {
    let mut sample = match parse_exposition_line(line)? {
        ParsedLine::Skip => return Ok(None),
        ParsedLine::Sample(s) => s,
    };
    let needs_rebuild =
        !source_labels.is_empty() || sample.key.labels().iter().any(|(k, _)| denylist.contains(k));
    if needs_rebuild {
        let mut labels: BTreeMap<&str, &str> = source_labels.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
        for (k, v) in sample.key.labels() {
            labels.insert(k, v);
        }
        let before = labels.len();
        labels.retain(|k, _| !denylist.contains(*k));
        *sanitized += (before - labels.len()) as u64;
        sample.key = canonicalize_series_key(sample.key.name(), labels)?;
    }
    Ok(Some(sample))
}

/// Per-request ingest parameters.
#[derive(Debug, Clone, Default)]
pub struct IngestContext {
    pub source_labels: BTreeMap<String, String>,
    /// Labels the caller is confined to; a sample carrying a different
    /// value is rejected, a sample lacking the label gets it added.
    pub scope: Vec<(String, String)>,
    pub now: i64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub accepted: usize,
    pub rejected: Vec<Reject>,
}

#[derive(Debug)]
pub struct Gateway {
    tsdb: Option<Arc<Tsdb>>,
    metastore: Option<Arc<Metastore>>,
    denylist: HashSet<String>,
    future_tolerance_ms: i64,
    counters: CounterTracker,
    metrics: Registry,
}

impl Gateway {
    pub fn new(
        settings: &GatewaySettings,
        tsdb: Option<Arc<Tsdb>>,
        metastore: Option<Arc<Metastore>>,
        metrics: Registry,
    ) -> Self {
        Gateway {
            tsdb,
            metastore,
            denylist: settings.sanitize_labels.iter().map(|k| k.to_ascii_lowercase()).collect(),
            future_tolerance_ms: settings.future_tolerance_seconds * 1000,
            counters: CounterTracker::default(),
            metrics,
        }
    }

    pub fn metrics(&self) -> &Registry {
        &self.metrics
    }

    pub fn counters(&self) -> &CounterTracker {
        &self.counters
    }

    pub fn ingest(&self, body: &str, ctx: &IngestContext) -> IngestReport {
        let batch = normalize_batch(body, &ctx.source_labels, &self.denylist, &self.metrics);
        let mut report = IngestReport {
            accepted: 0,
            rejected: batch.rejects,
        };
        let mut events = Vec::new();
        let mut event_lines = Vec::new();
        for sample in batch.accepted {
            match self.admit(sample, ctx) {
                Ok(sample) => match route_record(&sample) {
                    Destination::Tsdb => match self.store_series(&sample, ctx.now) {
                        Ok(()) => report.accepted += 1,
                        Err(e) => report.rejected.push(Reject::new(&sample.to_line(), &e)),
                    },
                    Destination::Metastore => {
                        event_lines.push(sample.to_line());
                        events.push(EventRecord::from_sample(&sample));
                    }
                },
                Err((line, e)) => report.rejected.push(Reject::new(&line, &e)),
            }
        }
        if !events.is_empty() {
            match &self.metastore {
                Some(m) => match m.record_events(&events) {
                    Ok(()) => report.accepted += events.len(),
                    Err(e) => {
                        let e = GatewayError::Metastore(e.to_string());
                        report.rejected.extend(event_lines.iter().map(|l| Reject::new(l, &e)));
                    }
                },
                None => {
                    let e = GatewayError::NoStore("event");
                    report.rejected.extend(event_lines.iter().map(|l| Reject::new(l, &e)));
                }
            }
        }
        self.metrics.inc(ACCEPTED_TOTAL, report.accepted as u64);
        self.metrics.inc(REJECTED_TOTAL, report.rejected.len() as u64);
        report
    }

    /// Applies scope, the timestamp window and counter adjustment.
    fn admit(&self, mut sample: MetricSample, ctx: &IngestContext) -> Result<MetricSample, (String, GatewayError)> {
        let fail = |s: &MetricSample, e| Err((s.to_line(), e));
        if !ctx.scope.is_empty() {
            let mut labels = sample.key.label_map();
            for (k, v) in &ctx.scope {
                match labels.get(k) {
                    Some(have) if have != v => return fail(&sample, GatewayError::ScopeConflict { key: k.clone() }),
                    Some(_) => {}
                    None => {
                        labels.insert(k.clone(), v.clone());
                    }
                }
            }
            sample.key = match canonicalize_series_key(sample.key.name(), labels.iter().map(|(k, v)| (k.as_str(), v.as_str()))) {
                Ok(k) => k,
                Err(e) => return fail(&sample, e.into()),
            };
        }
        if sample.timestamp > ctx.now + self.future_tolerance_ms {
            return fail(
                &sample,
                GatewayError::FutureTimestamp {
                    timestamp: sample.timestamp,
                    tolerance_ms: self.future_tolerance_ms,
                },
            );
        }
        if let Some(tsdb) = &self.tsdb {
            let cutoff = ctx.now - tsdb.policy().raw_ms;
            if sample.timestamp < cutoff {
                return fail(
                    &sample,
                    GatewayError::TooOld {
                        timestamp: sample.timestamp,
                        cutoff,
                    },
                );
            }
        }
        if sample.kind == SampleKind::Counter {
            match self.counters.observe(&sample.key, sample.timestamp, sample.value) {
                Ok(adjusted) => sample.value = adjusted,
                Err(e) => return fail(&sample, e),
            }
        }
        Ok(sample)
    }

    fn store_series(&self, sample: &MetricSample, now: i64) -> Result<(), GatewayError> {
        let tsdb = self.tsdb.as_ref().ok_or(GatewayError::NoStore("time-series"))?;
        if tsdb.append(sample, now)? == AppendOutcome::Duplicate {
            self.metrics.inc(DUPLICATES_TOTAL, 1);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::MINUTE_MS;
    use crate::selector::Selector;
    use crate::tsdb::{Aggregation, RetentionPolicy, DEFAULT_MAX_SERIES};

    const NOW: i64 = 1_700_000_000_000;

    fn denylist() -> HashSet<String> {
        GatewaySettings::default().sanitize_labels.into_iter().collect()
    }

    fn stack() -> (Gateway, Arc<Tsdb>, Arc<Metastore>) {
        let tsdb = Arc::new(Tsdb::in_memory(RetentionPolicy::default(), DEFAULT_MAX_SERIES).unwrap());
        let meta = Arc::new(Metastore::in_memory(1000));
        let gw = Gateway::new(&GatewaySettings::default(), Some(tsdb.clone()), Some(meta.clone()), Registry::new());
        (gw, tsdb, meta)
    }

    #[test]
    fn per_line_isolation() {
        let body = "a{} gauge none 1 5\nb{} gauge none 2 5\nthis is not a sample\nc{} gauge none 3 5\n";
        let batch = normalize_batch(body, &BTreeMap::new(), &denylist(), &Registry::new());
        assert_eq!(batch.accepted.len(), 3);
        assert_eq!(batch.rejects.len(), 1);
        assert_eq!(batch.rejects[0].code, "ParseError");
        assert_eq!(batch.rejects[0].line, "this is not a sample");
    }

    #[test]
    fn sanitizes_denylisted_labels() {
        let metrics = Registry::new();
        let body = r#"logins{email="x@y",site="a"} counter count 1 5"#;
        let batch = normalize_batch(body, &BTreeMap::new(), &denylist(), &metrics);
        assert_eq!(batch.accepted[0].key.to_string(), r#"logins{site="a"}"#);
        assert_eq!(metrics.get(SANITIZED_TOTAL), 1);
    }

    #[test]
    fn empty_body() {
        let batch = normalize_batch("", &BTreeMap::new(), &denylist(), &Registry::new());
        assert_eq!(batch, NormalizedBatch::default());
    }

    #[test]
    fn source_labels_lose_to_sample_labels() {
        let source = BTreeMap::from([("host".to_string(), "scraped".to_string()), ("job".to_string(), "node".to_string())]);
        let batch = normalize_batch(r#"x{host="own"} gauge none 1 5"#, &source, &denylist(), &Registry::new());
        assert_eq!(batch.accepted[0].key.to_string(), r#"x{host="own",job="node"}"#);
    }

    #[test]
    fn routing() {
        let s = |kind| MetricSample::new("m", &[], kind, crate::model::CanonicalUnit::None, 1.0, 1).unwrap();
        assert_eq!(route_record(&s(SampleKind::Gauge)), Destination::Tsdb);
        assert_eq!(route_record(&s(SampleKind::Counter)), Destination::Tsdb);
        assert_eq!(route_record(&s(SampleKind::Event)), Destination::Metastore);
    }

    #[test]
    fn ingest_routes_and_adjusts() {
        let (gw, tsdb, meta) = stack();
        let ctx = IngestContext {
            now: NOW,
            ..Default::default()
        };
        let body = format!(
            "req{{}} counter count 10 {}\nreq{{}} counter count 15 {}\nreq{{}} counter count 3 {}\nharvest_logged{{plot=\"p1\"}} event count 2 {}\n",
            NOW,
            NOW + 1,
            NOW + 2,
            NOW
        );
        let report = gw.ingest(&body, &ctx);
        assert_eq!(report.accepted, 4, "{:?}", report.rejected);
        let got = tsdb.query_range(&Selector::metric("req"), NOW, NOW + 10, 1, Aggregation::Raw).unwrap();
        assert_eq!(got[0].points.iter().map(|p| p.1).collect::<Vec<_>>(), vec![10.0, 15.0, 18.0]);
        let events = meta.query_events(&Selector::metric("harvest_logged"), NOW, NOW + 1).unwrap();
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].unit, "count");

        // resending the same batch is absorbed by storage dedup
        let again = gw.ingest(&body[..body.find("harvest").unwrap()], &ctx);
        assert_eq!(again.accepted, 3);
        let got = tsdb.query_range(&Selector::metric("req"), NOW, NOW + 10, 1, Aggregation::Raw).unwrap();
        assert_eq!(got[0].points.iter().map(|p| p.1).collect::<Vec<_>>(), vec![10.0, 15.0, 18.0]);
    }

    #[test]
    fn timestamp_window_and_negative_counter() {
        let (gw, _, _) = stack();
        let ctx = IngestContext {
            now: NOW,
            ..Default::default()
        };
        let body = format!(
            "a{{}} gauge none 1 {}\na{{}} gauge none 1 {}\nc{{}} counter count -1 {}\n",
            NOW + 6 * MINUTE_MS,
            NOW - 25 * 60 * MINUTE_MS,
            NOW
        );
        let report = gw.ingest(&body, &ctx);
        let codes: Vec<&str> = report.rejected.iter().map(|r| r.code.as_str()).collect();
        assert_eq!(codes, vec!["FutureTimestamp", "RetentionViolation", "NegativeCounter"]);
        assert_eq!(gw.metrics().get(REJECTED_TOTAL), 3);
    }

    #[test]
    fn scope_is_forced_onto_pushed_samples() {
        let (gw, tsdb, _) = stack();
        let ctx = IngestContext {
            now: NOW,
            scope: vec![("user_id".into(), "u7".into())],
            ..Default::default()
        };
        let body = format!("a{{}} gauge none 1 {NOW}\nb{{user_id=\"u9\"}} gauge none 1 {NOW}\n");
        let report = gw.ingest(&body, &ctx);
        assert_eq!(report.accepted, 1);
        assert_eq!(report.rejected[0].code, "ScopeConflict");
        assert_eq!(tsdb.series_keys(None)[0].to_string(), r#"a{user_id="u7"}"#);
    }

    #[test]
    fn missing_store() {
        let gw = Gateway::new(&GatewaySettings::default(), None, None, Registry::new());
        let report = gw.ingest(
            &format!("a{{}} gauge none 1 {NOW}\ne{{}} event none 1 {NOW}\n"),
            &IngestContext {
                now: NOW,
                ..Default::default()
            },
        );
        assert_eq!(report.accepted, 0);
        assert_eq!(report.rejected.len(), 2);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn no_denylisted_key_survives(
                labels in prop::collection::btree_map(
                    prop::sample::select(vec!["email", "ip", "user_name", "host", "site", "plot"]),
                    "[a-z0-9]{0,6}",
                    0..6,
                ),
                source in prop::collection::btree_map(
                    prop::sample::select(vec!["email", "ip", "user_name", "job"]),
                    "[a-z0-9]{0,6}",
                    0..4,
                ),
            ) {
                let body: Vec<String> = labels.iter().map(|(k, v)| format!("{k}=\"{v}\"")).collect();
                let line = format!("m{{{}}} gauge none 1 5", body.join(","));
                let source: BTreeMap<String, String> = source.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
                let batch = normalize_batch(&line, &source, &denylist(), &Registry::new());
                prop_assert_eq!(batch.accepted.len(), 1);
                for (k, _) in batch.accepted[0].key.labels() {
                    prop_assert!(!denylist().contains(k));
                }
            }
        }
    }
}
