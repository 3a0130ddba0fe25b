use dashmap::DashMap;
use serde::{Deserialize, Serialize};

use super::GatewayError;
use crate::model::SeriesKey;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CounterState {
    pub last_raw_value: f64,
    pub cumulative_adjusted: f64,
}

/// Reset-repairing accumulation. An increase adds the delta, a decrease is
/// taken as a restart from zero and adds the raw value. The first sample
/// of a series sets the cumulative value.
pub fn adjust_counter(state: &mut Option<CounterState>, raw_value: f64) -> Result<f64, GatewayError> {
    if !(raw_value >= 0.0) {
        return Err(GatewayError::NegativeCounter(raw_value));
    }
    let next = match *state {
        None => CounterState {
            last_raw_value: raw_value,
            cumulative_adjusted: raw_value,
        },
        Some(s) => {
            let gained = if raw_value >= s.last_raw_value {
                raw_value - s.last_raw_value
            } else {
                raw_value
            };
            CounterState {
                last_raw_value: raw_value,
                cumulative_adjusted: s.cumulative_adjusted + gained,
            }
        }
    };
    *state = Some(next);
    Ok(next.cumulative_adjusted)
}

#[derive(Debug, Clone, Copy)]
struct Tracked {
    state: Option<CounterState>,
    last_timestamp: i64,
}

/// Counter state of every series. Updates to one series are serialized by
/// the map's entry lock; different series proceed in parallel.
#[derive(Debug, Default)]
pub struct CounterTracker {
    series: DashMap<SeriesKey, Tracked>,
}

impl CounterTracker {
    /// Adjusts `raw_value` observed at `timestamp`. A sample not newer than
    /// the last one seen (a resend or a straggler) leaves the state alone
    /// and reports the current cumulative value.
    pub fn observe(&self, key: &SeriesKey, timestamp: i64, raw_value: f64) -> Result<f64, GatewayError> {
        if !(raw_value >= 0.0) {
            return Err(GatewayError::NegativeCounter(raw_value));
        }
        let mut entry = self.series.entry(key.clone()).or_insert(Tracked {
            state: None,
            last_timestamp: i64::MIN,
        });
        if timestamp <= entry.last_timestamp {
            if let Some(s) = entry.state {
                return Ok(s.cumulative_adjusted);
            }
        }
        let adjusted = adjust_counter(&mut entry.state, raw_value)?;
        entry.last_timestamp = timestamp;
        Ok(adjusted)
    }

    pub fn state(&self, key: &SeriesKey) -> Option<CounterState> {
        self.series.get(key).and_then(|t| t.state)
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }
}
