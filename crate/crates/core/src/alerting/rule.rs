use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::AlertError;
use crate::hash::fnv1a64;
use crate::selector::Selector;
use crate::tsdb::Aggregation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparator {
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "<=")]
    Le,
}

impl Comparator {
    pub fn holds(self, value: f64, threshold: f64) -> bool {
        match self {
            Comparator::Gt => value > threshold,
            Comparator::Lt => value < threshold,
            Comparator::Ge => value >= threshold,
            Comparator::Le => value <= threshold,
        }
    }
}

impl fmt::Display for Comparator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Comparator::Gt => ">",
            Comparator::Lt => "<",
            Comparator::Ge => ">=",
            Comparator::Le => "<=",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlertMode {
    #[default]
    Threshold,
    /// Condition holds while the latest point of a series is anomalous.
    Anomaly,
}

fn default_agg() -> Aggregation {
    Aggregation::Mean
}

fn default_comparator() -> Comparator {
    Comparator::Gt
}

fn default_eval_interval() -> i64 {
    15_000
}

fn default_lookback() -> i64 {
    3_600_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertRule {
    pub rule_id: String,
    pub selector: Selector,
    #[serde(default = "default_agg")]
    pub agg: Aggregation,
    #[serde(default = "default_comparator")]
    pub comparator: Comparator,
    #[serde(default)]
    pub threshold: f64,
    #[serde(default)]
    pub for_duration_ms: i64,
    #[serde(default = "default_eval_interval")]
    pub eval_interval_ms: i64,
    #[serde(default)]
    pub mode: AlertMode,
    /// How far back anomaly-mode rules look for a baseline.
    #[serde(default = "default_lookback")]
    pub lookback_ms: i64,
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
    #[serde(default)]
    pub webhook_url: String,
}

impl AlertRule {
    pub fn threshold(rule_id: &str, selector: Selector, comparator: Comparator, threshold: f64) -> Self {
        AlertRule {
            rule_id: rule_id.to_string(),
            selector,
            agg: default_agg(),
            comparator,
            threshold,
            for_duration_ms: 0,
            eval_interval_ms: default_eval_interval(),
            mode: AlertMode::Threshold,
            lookback_ms: default_lookback(),
            labels: BTreeMap::new(),
            webhook_url: String::new(),
        }
    }

    pub fn validate(&self) -> Result<(), AlertError> {
        let bad = |m: String| Err(AlertError::InvalidRule(m));
        if self.rule_id.trim().is_empty() {
            return bad("rule_id must not be empty".into());
        }
        if self.for_duration_ms < 0 {
            return bad(format!("for_duration_ms must be >= 0, got {}", self.for_duration_ms));
        }
        if self.eval_interval_ms < 1000 {
            return bad(format!("eval_interval_ms must be >= 1000, got {}", self.eval_interval_ms));
        }
        if !self.threshold.is_finite() {
            return bad("threshold must be finite".into());
        }
        if self.mode == AlertMode::Threshold && self.agg == Aggregation::Raw {
            return bad("threshold rules need an aggregation other than raw".into());
        }
        if self.mode == AlertMode::Anomaly && self.lookback_ms <= 0 {
            return bad("lookback_ms must be positive".into());
        }
        Ok(())
    }
}

/// FNV-1a over `rule_id` followed by `\0k=v` for every label, labels sorted
/// by key then value first.
pub fn fingerprint(rule_id: &str, labels: &[(String, String)]) -> u64 {
    let mut sorted: Vec<&(String, String)> = labels.iter().collect();
    sorted.sort();
    let mut bytes = Vec::with_capacity(rule_id.len() + labels.len() * 16);
    bytes.extend_from_slice(rule_id.as_bytes());
    for (k, v) in sorted {
        bytes.push(0);
        bytes.extend_from_slice(k.as_bytes());
        bytes.push(b'=');
        bytes.extend_from_slice(v.as_bytes());
    }
    fnv1a64(&bytes)
}

pub fn fingerprint_hex(fp: u64) -> String {
    format!("{fp:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn l(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn fingerprint_bytes() {
        // independent byte string for the documented layout
        let expected = fnv1a64(b"cpu_high\0host=n1\0zone=b");
        assert_eq!(fingerprint("cpu_high", &l(&[("zone", "b"), ("host", "n1")])), expected);
        assert_eq!(fingerprint("cpu_high", &l(&[("host", "n1"), ("zone", "b")])), expected);
        assert_eq!(fingerprint("r", &[]), fnv1a64(b"r"));
        assert_eq!(fingerprint_hex(0xab), "00000000000000ab");
    }

    #[test]
    fn no_collisions_over_many_rules() {
        let labels = l(&[("host", "n1")]);
        let seen: HashSet<u64> = (0..100_000).map(|i| fingerprint(&format!("rule-{i}"), &labels)).collect();
        assert_eq!(seen.len(), 100_000);
    }

    #[test]
    fn rule_json_and_validation() {
        let rule: AlertRule = serde_json::from_str(
            r#"{"rule_id":"cpu","selector":"cpu_utilization{host=\"n1\"}","comparator":">=","threshold":0.9,"for_duration_ms":60000}"#,
        )
        .unwrap();
        assert_eq!(rule.comparator, Comparator::Ge);
        assert_eq!(rule.eval_interval_ms, 15_000);
        assert_eq!(rule.agg, Aggregation::Mean);
        rule.validate().unwrap();
        let mut bad = rule.clone();
        bad.eval_interval_ms = 500;
        assert!(bad.validate().is_err());
        bad = rule.clone();
        bad.for_duration_ms = -1;
        assert!(bad.validate().is_err());
        bad = rule;
        bad.rule_id = " ".into();
        assert!(bad.validate().is_err());
    }
}
