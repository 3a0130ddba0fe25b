use serde::{Deserialize, Serialize};

use super::TsdbError;
use crate::clock::align_down;

/// Distilled summary of the raw points in one aligned window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RollupPoint {
    pub window_start: i64,
    pub window_len: i64,
    pub count: u64,
    pub sum: f64,
    pub min: f64,
    pub max: f64,
    pub sum_sq: f64,
}

impl RollupPoint {
    pub fn from_value(window_start: i64, window_len: i64, value: f64) -> Self {
        RollupPoint {
            window_start,
            window_len,
            count: 1,
            sum: value,
            min: value,
            max: value,
            sum_sq: value * value,
        }
    }

    pub fn push(&mut self, value: f64) {
        self.count += 1;
        self.sum += value;
        self.min = self.min.min(value);
        self.max = self.max.max(value);
        self.sum_sq += value * value;
    }

    /// Folds `other` into `self`; count/sum/min/max/sum_sq are all associative.
    pub fn merge(&mut self, other: &RollupPoint) {
        self.count += other.count;
        self.sum += other.sum;
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
        self.sum_sq += other.sum_sq;
    }

    pub fn mean(&self) -> f64 {
        self.sum / self.count as f64
    }

    /// Population variance, clamped at zero against rounding.
    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        (self.sum_sq / self.count as f64 - mean * mean).max(0.0)
    }

    /// Checks `min <= mean <= max`, `count >= 1` and `sum_sq >= sum^2/count`,
    /// each with a relative slack for float rounding.
    pub fn is_consistent(&self) -> bool {
        if self.count == 0 {
            return false;
        }
        let mean = self.mean();
        let slack = 1e-9 * mean.abs().max(self.max.abs()).max(self.min.abs()).max(1.0);
        let var_slack = 1e-9 * self.sum_sq.abs().max(1.0);
        self.min <= mean + slack
            && mean <= self.max + slack
            && self.sum_sq + var_slack >= self.sum * self.sum / self.count as f64
    }
}

/// Summarises time-sorted raw `points` into one rollup per non-empty
/// `resolution` bucket within `[start, end)`.
pub fn downsample(points: &[(i64, f64)], resolution: i64, start: i64, end: i64) -> Result<Vec<RollupPoint>, TsdbError> {
    if resolution <= 0 || start.rem_euclid(resolution) != 0 || end.rem_euclid(resolution) != 0 {
        return Err(TsdbError::UnalignedWindow { start, end, resolution });
    }
    if start > end {
        return Err(TsdbError::InvalidRange { start, end });
    }
    let mut out: Vec<RollupPoint> = Vec::new();
    for &(t, v) in points {
        if t < start || t >= end {
            continue;
        }
        let bucket = align_down(t, resolution);
        match out.last_mut() {
            Some(last) if last.window_start == bucket => last.push(v),
            _ => out.push(RollupPoint::from_value(bucket, resolution, v)),
        }
    }
    Ok(out)
}

/// Re-aggregates finer rollups into coarser `resolution` windows.
pub fn reaggregate(rollups: &[RollupPoint], resolution: i64) -> Vec<RollupPoint> {
    let mut out: Vec<RollupPoint> = Vec::new();
    for r in rollups {
        let bucket = align_down(r.window_start, resolution);
        match out.last_mut() {
            Some(last) if last.window_start == bucket => last.merge(r),
            _ => {
                let mut p = *r;
                p.window_start = bucket;
                p.window_len = resolution;
                out.push(p);
            }
        }
    }
    out
}
