//! Self-metrics: named monotone counters every component increments and the
//! api server exposes at `/metrics`.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::RwLock;

use crate::model::{CanonicalUnit, MetricSample, SampleKind};

#[derive(Debug, Default, Clone)]
pub struct Registry {
    counters: Arc<RwLock<BTreeMap<String, Arc<AtomicU64>>>>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn counter(&self, name: &str) -> Arc<AtomicU64> {
        if let Some(c) = self.counters.read().get(name) {
            return c.clone();
        }
        self.counters
            .write()
            .entry(name.to_string())
            .or_insert_with(|| Arc::new(AtomicU64::new(0)))
            .clone()
    }

    pub fn inc(&self, name: &str, by: u64) {
        self.counter(name).fetch_add(by, Ordering::Relaxed);
    }

    pub fn get(&self, name: &str) -> u64 {
        self.counters
            .read()
            .get(name)
            .map(|c| c.load(Ordering::Relaxed))
            .unwrap_or(0)
    }

    pub fn snapshot(&self) -> BTreeMap<String, u64> {
        self.counters
            .read()
            .iter()
            .map(|(k, v)| (k.clone(), v.load(Ordering::Relaxed)))
            .collect()
    }

    /// Current counter values as counter samples stamped `timestamp`.
    pub fn samples(&self, labels: &[(&str, &str)], timestamp: i64) -> Vec<MetricSample> {
        self.snapshot()
            .into_iter()
            .filter_map(|(name, value)| {
                MetricSample::new(
                    &name,
                    labels,
                    SampleKind::Counter,
                    CanonicalUnit::Count,
                    value as f64,
                    timestamp,
                )
                .ok()
            })
            .collect()
    }
}
