use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::rollup::RollupPoint;
use super::TsdbError;
use crate::model::SeriesKey;

/// Per-bucket aggregation for range queries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Aggregation {
    Raw,
    Mean,
    Min,
    Max,
    Sum,
    Count,
    Quantile(f64),
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Aggregation::Raw => f.write_str("raw"),
            Aggregation::Mean => f.write_str("mean"),
            Aggregation::Min => f.write_str("min"),
            Aggregation::Max => f.write_str("max"),
            Aggregation::Sum => f.write_str("sum"),
            Aggregation::Count => f.write_str("count"),
            Aggregation::Quantile(q) => write!(f, "quantile({q})"),
        }
    }
}

impl FromStr for Aggregation {
    type Err = TsdbError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        Ok(match s {
            "raw" => Aggregation::Raw,
            "mean" | "avg" => Aggregation::Mean,
            "min" => Aggregation::Min,
            "max" => Aggregation::Max,
            "sum" => Aggregation::Sum,
            "count" => Aggregation::Count,
            _ => {
                let inner = s
                    .strip_prefix("quantile(")
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(|| TsdbError::InvalidAggregation(s.to_string()))?;
                let q: f64 = inner
                    .trim()
                    .parse()
                    .map_err(|_| TsdbError::InvalidAggregation(s.to_string()))?;
                if !(q > 0.0 && q <= 1.0) {
                    return Err(TsdbError::InvalidQuantile(q));
                }
                Aggregation::Quantile(q)
            }
        })
    }
}

impl Serialize for Aggregation {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Aggregation {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        String::deserialize(deserializer)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Nearest-rank quantile: the `ceil(q * n)`-th smallest value (1-based).
pub fn quantile(values: &[f64], q: f64) -> Result<f64, TsdbError> {
    if values.is_empty() {
        return Err(TsdbError::EmptyInput);
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(TsdbError::InvalidQuantile(q));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = nearest_rank(q, sorted.len());
    Ok(sorted[rank - 1])
}

/// `ceil(q * n)` clamped to `[1, n]`. A product sitting within float noise
/// above an integer (0.07 * 100 = 7.000000000000001) rounds to that integer.
pub(crate) fn nearest_rank(q: f64, n: usize) -> usize {
    let x = q * n as f64;
    let nearest = x.round();
    let rank = if (x - nearest).abs() <= 1e-9 * x.abs().max(1.0) {
        nearest
    } else {
        x.ceil()
    };
    (rank as usize).clamp(1, n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesResult {
    pub key: SeriesKey,
    pub points: Vec<(i64, f64)>,
}

/// Accumulator for one output bucket.
#[derive(Debug, Default)]
pub(crate) struct Bucket {
    pub summary: Option<RollupPoint>,
    pub raw_values: Vec<f64>,
    pub from_rollup: bool,
}

impl Bucket {
    pub fn add_raw(&mut self, value: f64, keep_values: bool) {
        match &mut self.summary {
            Some(s) => s.push(value),
            None => self.summary = Some(RollupPoint::from_value(0, 0, value)),
        }
        if keep_values {
            self.raw_values.push(value);
        }
    }

    pub fn add_rollup(&mut self, r: &RollupPoint) {
        self.from_rollup = true;
        match &mut self.summary {
            Some(s) => s.merge(r),
            None => self.summary = Some(*r),
        }
    }

    pub fn finish(self, agg: Aggregation) -> Result<Option<f64>, TsdbError> {
        let Some(s) = self.summary else { return Ok(None) };
        Ok(Some(match agg {
            Aggregation::Raw => unreachable!("raw queries are not bucketed"),
            Aggregation::Mean => s.mean(),
            Aggregation::Min => s.min,
            Aggregation::Max => s.max,
            Aggregation::Sum => s.sum,
            Aggregation::Count => s.count as f64,
            Aggregation::Quantile(q) => {
                if self.from_rollup {
                    return Err(TsdbError::QuantileNeedsRaw);
                }
                quantile(&self.raw_values, q)?
            }
        }))
    }
}
