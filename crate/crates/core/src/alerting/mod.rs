//! Alert rules, their per-series lifecycle and webhook delivery.

mod rule;
mod state;
mod webhook;

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use rule::{fingerprint, fingerprint_hex, AlertMode, AlertRule, Comparator};
pub use state::{is_legal, next_state, AlertState};
pub use webhook::{DeliveryResult, Notification, Notifier, DELIVERED_TOTAL, DROPPED_TOTAL, SUPPRESSED_TOTAL};

use crate::analytics::{score_points, AnalyticsError, AnomalyParams};
use crate::metastore::{AlertHistoryEntry, Metastore};
use crate::metrics::Registry;
use crate::retry::RetryPolicy;
use crate::tsdb::Tsdb;

pub const EVAL_ERRORS_TOTAL: &str = "alert_eval_errors_total";
const RULES_TABLE: &str = "rules";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AlertError {
    #[error("invalid rule: {0}")]
    InvalidRule(String),
    #[error("unknown rule `{0}`")]
    UnknownRule(String),
    #[error("query failed: {0}")]
    QueryFailed(String),
    #[error("storage: {0}")]
    Storage(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlertingSettings {
    pub default_eval_interval_seconds: u64,
    /// Used by rules without their own webhook URL.
    pub webhook_url: Option<String>,
    pub retry_base_ms: u64,
}

impl Default for AlertingSettings {
    fn default() -> Self {
        AlertingSettings {
            default_eval_interval_seconds: 15,
            webhook_url: None,
            retry_base_ms: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertInstance {
    pub fingerprint: String,
    pub rule_id: String,
    pub labels: BTreeMap<String, String>,
    pub state: AlertState,
    /// When the current state was entered.
    pub since: i64,
    pub last_value: f64,
    /// When the instance last left `inactive`.
    pub episode_start: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Transition {
    pub fingerprint: String,
    pub rule_id: String,
    pub labels: BTreeMap<String, String>,
    pub from: AlertState,
    pub to: AlertState,
    pub value: f64,
    pub at: i64,
    pub episode_start: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub url: String,
    pub episode_start: i64,
    pub notification: Notification,
}

struct Observation {
    labels: BTreeMap<String, String>,
    value: f64,
    condition: bool,
}

#[derive(Debug)]
pub struct AlertEngine {
    tsdb: Arc<Tsdb>,
    metastore: Option<Arc<Metastore>>,
    anomaly: AnomalyParams,
    settings: AlertingSettings,
    rules: RwLock<BTreeMap<String, AlertRule>>,
    instances: Mutex<BTreeMap<String, BTreeMap<u64, AlertInstance>>>,
    next_due: Mutex<HashMap<String, i64>>,
    notifier: Notifier,
    metrics: Registry,
}

impl AlertEngine {
    pub fn new(
        tsdb: Arc<Tsdb>,
        metastore: Option<Arc<Metastore>>,
        anomaly: AnomalyParams,
        settings: AlertingSettings,
        metrics: Registry,
    ) -> Self {
        let policy = RetryPolicy {
            base: Duration::from_millis(settings.retry_base_ms),
            ..RetryPolicy::default()
        };
        let mut rules = BTreeMap::new();
        if let Some(m) = &metastore {
            for (id, rule) in m.list::<AlertRule>(RULES_TABLE) {
                rules.insert(id, rule);
            }
        }
        AlertEngine {
            tsdb,
            metastore,
            anomaly,
            settings,
            rules: RwLock::new(rules),
            instances: Mutex::new(BTreeMap::new()),
            next_due: Mutex::new(HashMap::new()),
            notifier: Notifier::new(policy, metrics.clone()),
            metrics,
        }
    }

    pub fn metrics(&self) -> &Registry {
        &self.metrics
    }

    pub fn upsert_rule(&self, rule: AlertRule) -> Result<(), AlertError> {
        rule.validate()?;
        if let Some(m) = &self.metastore {
            m.put(RULES_TABLE, &rule.rule_id, &rule)
                .map_err(|e| AlertError::Storage(e.to_string()))?;
        }
        let mut rules = self.rules.write();
        if rules.get(&rule.rule_id).is_some_and(|old| old.selector != rule.selector || old.mode != rule.mode) {
            self.instances.lock().remove(&rule.rule_id);
        }
        rules.insert(rule.rule_id.clone(), rule);
        Ok(())
    }

    pub fn delete_rule(&self, rule_id: &str) -> Result<bool, AlertError> {
        if let Some(m) = &self.metastore {
            m.delete(RULES_TABLE, rule_id).map_err(|e| AlertError::Storage(e.to_string()))?;
        }
        self.instances.lock().remove(rule_id);
        self.next_due.lock().remove(rule_id);
        Ok(self.rules.write().remove(rule_id).is_some())
    }

    pub fn rule(&self, rule_id: &str) -> Option<AlertRule> {
        self.rules.read().get(rule_id).cloned()
    }

    pub fn rules(&self) -> Vec<AlertRule> {
        self.rules.read().values().cloned().collect()
    }

    /// Current instances that are not inactive.
    pub fn instances(&self) -> Vec<AlertInstance> {
        self.instances
            .lock()
            .values()
            .flat_map(|m| m.values())
            .filter(|i| i.state != AlertState::Inactive)
            .cloned()
            .collect()
    }

    fn observe(&self, rule: &AlertRule, now: i64) -> Result<Vec<Observation>, AlertError> {
        let with_rule_labels = |key: &crate::model::SeriesKey| {
            let mut labels = key.label_map();
            labels.insert("__name__".to_string(), key.name().to_string());
            for (k, v) in &rule.labels {
                labels.insert(k.clone(), v.clone());
            }
            labels
        };
        match rule.mode {
            AlertMode::Threshold => {
                let ei = rule.eval_interval_ms;
                let results = self
                    .tsdb
                    .query_range(&rule.selector, now - ei, now + 1, ei + 1, rule.agg)
                    .map_err(|e| AlertError::QueryFailed(e.to_string()))?;
                Ok(results
                    .into_iter()
                    .filter_map(|r| {
                        let value = r.points.last()?.1;
                        Some(Observation {
                            labels: with_rule_labels(&r.key),
                            value,
                            condition: rule.comparator.holds(value, rule.threshold),
                        })
                    })
                    .collect())
            }
            AlertMode::Anomaly => {
                let mut out = Vec::new();
                for key in self.tsdb.series_keys(Some(&rule.selector)) {
                    let points = self.tsdb.raw_points(&key, now - rule.lookback_ms, now + 1);
                    match score_points(&points, &self.anomaly) {
                        Ok(scores) => {
                            let Some(&(_, score, flagged)) = scores.last() else { continue };
                            out.push(Observation {
                                labels: with_rule_labels(&key),
                                value: score.abs(),
                                condition: flagged,
                            });
                        }
                        Err(AnalyticsError::InsufficientData { .. }) => {}
                        Err(e) => return Err(AlertError::QueryFailed(e.to_string())),
                    }
                }
                Ok(out)
            }
        }
    }

    /// One evaluation of `rule`. Every matched series (and every live
    /// instance that stopped matching) makes at most one state change. On
    /// query failure the state is left untouched.
    pub fn evaluate_rule(&self, rule: &AlertRule, now: i64) -> Result<Vec<Transition>, AlertError> {
        let observations = match self.observe(rule, now) {
            Ok(o) => o,
            Err(e) => {
                self.metrics.inc(EVAL_ERRORS_TOTAL, 1);
                tracing::warn!(rule = %rule.rule_id, error = %e, "alert evaluation skipped");
                return Err(e);
            }
        };
        let mut all = self.instances.lock();
        let instances = all.entry(rule.rule_id.clone()).or_default();
        let mut seen = Vec::with_capacity(observations.len());
        let mut transitions = Vec::new();
        let mut step = |inst: &mut AlertInstance, condition: bool, value: f64| {
            inst.last_value = value;
            let next = next_state(inst.state, inst.since, condition, now, rule.for_duration_ms);
            if next == inst.state {
                return;
            }
            if inst.state == AlertState::Inactive {
                inst.episode_start = now;
            }
            transitions.push(Transition {
                fingerprint: inst.fingerprint.clone(),
                rule_id: inst.rule_id.clone(),
                labels: inst.labels.clone(),
                from: inst.state,
                to: next,
                value,
                at: now,
                episode_start: inst.episode_start,
            });
            inst.state = next;
            inst.since = now;
        };
        for obs in observations {
            let pairs: Vec<(String, String)> = obs.labels.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
            let fp = fingerprint(&rule.rule_id, &pairs);
            seen.push(fp);
            let inst = instances.entry(fp).or_insert_with(|| AlertInstance {
                fingerprint: fingerprint_hex(fp),
                rule_id: rule.rule_id.clone(),
                labels: obs.labels.clone(),
                state: AlertState::Inactive,
                since: now,
                last_value: obs.value,
                episode_start: now,
            });
            step(inst, obs.condition, obs.value);
        }
        for (fp, inst) in instances.iter_mut() {
            if !seen.contains(fp) {
                let value = inst.last_value;
                step(inst, false, value);
            }
        }
        instances.retain(|fp, inst| inst.state != AlertState::Inactive || seen.contains(fp));
        drop(all);

        if let Some(m) = &self.metastore {
            for t in &transitions {
                let entry = AlertHistoryEntry {
                    fingerprint: t.fingerprint.clone(),
                    rule_id: t.rule_id.clone(),
                    from: t.from.to_string(),
                    to: t.to.to_string(),
                    value: t.value,
                    labels: t.labels.clone(),
                    timestamp: t.at,
                };
                if let Err(e) = m.record_alert_transition(&entry) {
                    tracing::warn!(error = %e, "alert history not recorded");
                }
            }
        }
        Ok(transitions)
    }

    /// Notifications owed for `transitions` of `rule`.
    pub fn deliveries(&self, rule: &AlertRule, transitions: &[Transition]) -> Vec<Delivery> {
        let url = if rule.webhook_url.is_empty() {
            match &self.settings.webhook_url {
                Some(u) if !u.is_empty() => u.clone(),
                _ => return Vec::new(),
            }
        } else {
            rule.webhook_url.clone()
        };
        transitions
            .iter()
            .filter(|t| t.to.notifies())
            .map(|t| Delivery {
                url: url.clone(),
                episode_start: t.episode_start,
                notification: Notification {
                    fingerprint: t.fingerprint.clone(),
                    rule_id: t.rule_id.clone(),
                    state: t.to,
                    value: t.value,
                    labels: t.labels.clone(),
                    timestamp_ms: t.at,
                },
            })
            .collect()
    }

    /// Evaluates every rule whose interval has elapsed.
    pub fn evaluate_due(&self, now: i64) -> (Vec<Transition>, Vec<Delivery>) {
        let rules = self.rules();
        let mut transitions = Vec::new();
        let mut deliveries = Vec::new();
        for rule in rules {
            {
                let mut due = self.next_due.lock();
                let next = due.entry(rule.rule_id.clone()).or_insert(now);
                if now < *next {
                    continue;
                }
                *next = now + rule.eval_interval_ms;
            }
            if let Ok(t) = self.evaluate_rule(&rule, now) {
                deliveries.extend(self.deliveries(&rule, &t));
                transitions.extend(t);
            }
        }
        (transitions, deliveries)
    }

    pub async fn deliver(&self, delivery: &Delivery) -> DeliveryResult {
        self.notifier
            .deliver(&delivery.url, delivery.episode_start, &delivery.notification)
            .await
    }

    /// Delivers concurrently, returning results in input order.
    pub async fn dispatch(self: &Arc<Self>, deliveries: Vec<Delivery>) -> Vec<DeliveryResult> {
        let mut set = tokio::task::JoinSet::new();
        for (i, d) in deliveries.into_iter().enumerate() {
            let this = self.clone();
            set.spawn(async move { (i, this.deliver(&d).await) });
        }
        let mut out: Vec<(usize, DeliveryResult)> = Vec::new();
        while let Some(res) = set.join_next().await {
            match res {
                Ok(r) => out.push(r),
                Err(e) => tracing::error!(error = %e, "delivery task failed"),
            }
        }
        out.sort_by_key(|(i, _)| *i);
        out.into_iter().map(|(_, r)| r).collect()
    }

    /// Evaluation loop: checks for due rules every second; deliveries run
    /// in the background.
    pub async fn run(self: Arc<Self>) {
        let mut ticker = tokio::time::interval(Duration::from_secs(1));
        ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            ticker.tick().await;
            let (_, deliveries) = self.evaluate_due(crate::clock::now_ms());
            if !deliveries.is_empty() {
                let this = self.clone();
                tokio::spawn(async move {
                    this.dispatch(deliveries).await;
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::canonicalize_series_key;
    use crate::selector::Selector;
    use crate::tsdb::{RetentionPolicy, DEFAULT_MAX_SERIES};

    const T0: i64 = 1_700_000_000_000;

    fn engine() -> (AlertEngine, Arc<Tsdb>) {
        let tsdb = Arc::new(Tsdb::in_memory(RetentionPolicy::default(), DEFAULT_MAX_SERIES).unwrap());
        let meta = Arc::new(Metastore::in_memory(10_000));
        let e = AlertEngine::new(
            tsdb.clone(),
            Some(meta),
            AnomalyParams::default(),
            AlertingSettings::default(),
            Registry::new(),
        );
        (e, tsdb)
    }

    fn put(tsdb: &Tsdb, host: &str, t: i64, v: f64) {
        let k = canonicalize_series_key("cpu", [("host", host)]).unwrap();
        tsdb.append_point(&k, t, v, t).unwrap();
    }

    fn rule(for_ms: i64) -> AlertRule {
        let mut r = AlertRule::threshold("cpu_high", Selector::metric("cpu"), Comparator::Gt, 0.9);
        r.for_duration_ms = for_ms;
        r
    }

    #[test]
    fn threshold_lifecycle() {
        let (e, tsdb) = engine();
        let r = rule(60_000);
        e.upsert_rule(r.clone()).unwrap();
        let states = |t: &[Transition]| t.iter().map(|t| (t.from, t.to)).collect::<Vec<_>>();
        use AlertState::*;

        put(&tsdb, "n1", T0, 0.95);
        assert_eq!(states(&e.evaluate_rule(&r, T0).unwrap()), vec![(Inactive, Pending)]);
        let mut now = T0;
        for _ in 0..3 {
            now += 15_000;
            put(&tsdb, "n1", now, 0.95);
            assert!(e.evaluate_rule(&r, now).unwrap().is_empty());
        }
        now += 15_000;
        put(&tsdb, "n1", now, 0.95);
        assert_eq!(states(&e.evaluate_rule(&r, now).unwrap()), vec![(Pending, Firing)]);
        assert_eq!(e.instances().len(), 1);

        now += 15_000;
        put(&tsdb, "n1", now, 0.1);
        assert_eq!(states(&e.evaluate_rule(&r, now).unwrap()), vec![(Firing, Resolved)]);
        now += 15_000;
        put(&tsdb, "n1", now, 0.1);
        assert_eq!(states(&e.evaluate_rule(&r, now).unwrap()), vec![(Resolved, Inactive)]);
        assert!(e.instances().is_empty());
    }

    #[test]
    fn zero_for_duration_fires_immediately() {
        let (e, tsdb) = engine();
        put(&tsdb, "n1", T0, 0.95);
        let t = e.evaluate_rule(&rule(0), T0).unwrap();
        assert_eq!((t[0].from, t[0].to), (AlertState::Inactive, AlertState::Firing));
    }

    #[test]
    fn vanished_series_resolves() {
        let (e, tsdb) = engine();
        put(&tsdb, "n1", T0, 0.95);
        e.evaluate_rule(&rule(0), T0).unwrap();
        let t = e.evaluate_rule(&rule(0), T0 + 60_000).unwrap();
        assert_eq!(t[0].to, AlertState::Resolved);
    }

    #[test]
    fn one_instance_per_series() {
        let (e, tsdb) = engine();
        put(&tsdb, "n1", T0, 0.95);
        put(&tsdb, "n2", T0, 0.95);
        put(&tsdb, "n3", T0, 0.5);
        let t = e.evaluate_rule(&rule(0), T0).unwrap();
        assert_eq!(t.len(), 2);
        assert_ne!(t[0].fingerprint, t[1].fingerprint);
        assert_eq!(t[0].labels["__name__"], "cpu");
    }

    #[test]
    fn failed_query_freezes_state() {
        let (e, tsdb) = engine();
        put(&tsdb, "n1", T0, 0.95);
        let mut r = rule(0);
        r.agg = crate::tsdb::Aggregation::Quantile(0.5);
        e.evaluate_rule(&r, T0).unwrap();
        // eval interval below the query step floor makes the query fail
        r.eval_interval_ms = 10;
        assert!(matches!(e.evaluate_rule(&r, T0 + 15_000), Err(AlertError::QueryFailed(_))));
        assert_eq!(e.metrics().get(EVAL_ERRORS_TOTAL), 1);
        assert_eq!(e.instances()[0].state, AlertState::Firing);
    }

    #[test]
    fn anomaly_mode() {
        let (e, tsdb) = engine();
        let mut r = rule(0);
        r.mode = AlertMode::Anomaly;
        r.rule_id = "cpu_anomaly".into();
        for i in 0..100 {
            put(&tsdb, "n1", T0 + i * 1000, 0.2);
        }
        let now = T0 + 99_000;
        assert!(e.evaluate_rule(&r, now).unwrap().is_empty());
        put(&tsdb, "n1", now + 1000, 0.9);
        let t = e.evaluate_rule(&r, now + 1000).unwrap();
        assert_eq!(t[0].to, AlertState::Firing);
    }

    #[test]
    fn deliveries_only_for_notifying_states() {
        let (e, tsdb) = engine();
        let mut r = rule(15_000);
        r.webhook_url = "http://127.0.0.1:1/hook".into();
        put(&tsdb, "n1", T0, 0.95);
        let t = e.evaluate_rule(&r, T0).unwrap();
        assert!(e.deliveries(&r, &t).is_empty());
        put(&tsdb, "n1", T0 + 15_000, 0.95);
        let t = e.evaluate_rule(&r, T0 + 15_000).unwrap();
        let d = e.deliveries(&r, &t);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].notification.state, AlertState::Firing);
        assert_eq!(d[0].episode_start, T0);
    }

    #[test]
    fn rules_persist_in_metastore() {
        let tsdb = Arc::new(Tsdb::in_memory(RetentionPolicy::default(), DEFAULT_MAX_SERIES).unwrap());
        let meta = Arc::new(Metastore::in_memory(10_000));
        let make = || AlertEngine::new(tsdb.clone(), Some(meta.clone()), AnomalyParams::default(), AlertingSettings::default(), Registry::new());
        make().upsert_rule(rule(0)).unwrap();
        assert_eq!(make().rules().len(), 1);
        assert!(make().delete_rule("cpu_high").unwrap());
        assert!(make().rules().is_empty());
        let mut bad = rule(0);
        bad.eval_interval_ms = 1;
        assert!(matches!(make().upsert_rule(bad), Err(AlertError::InvalidRule(_))));
    }
}
