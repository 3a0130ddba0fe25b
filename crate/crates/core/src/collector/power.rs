use serde::{Deserialize, Serialize};

use super::CollectorError;

/// Utilisation-driven machine power model:
/// `p_idle + (p_max - p_idle) * utilization^exponent`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerModel {
    #[serde(rename = "p_idle_watts")]
    pub p_idle: f64,
    #[serde(rename = "p_max_watts")]
    pub p_max: f64,
    #[serde(default = "default_exponent")]
    pub exponent: f64,
}

fn default_exponent() -> f64 {
    1.0
}

impl Default for PowerModel {
    fn default() -> Self {
        PowerModel {
            p_idle: 50.0,
            p_max: 150.0,
            exponent: 1.0,
        }
    }
}

impl PowerModel {
    pub fn new(p_idle: f64, p_max: f64, exponent: f64) -> Result<Self, CollectorError> {
        let model = PowerModel {
            p_idle,
            p_max,
            exponent,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<(), CollectorError> {
        let ok = self.p_idle.is_finite()
            && self.p_max.is_finite()
            && self.p_idle >= 0.0
            && self.p_idle <= self.p_max
            && self.exponent.is_finite()
            && self.exponent > 0.0;
        if ok {
            Ok(())
        } else {
            Err(CollectorError::InvalidPowerModel(*self))
        }
    }
}

/// Estimated power draw in watts for a utilisation in `[0, 1]`.
pub fn estimate_power(utilization: f64, model: &PowerModel) -> Result<f64, CollectorError> {
    if !(0.0..=1.0).contains(&utilization) {
        return Err(CollectorError::OutOfRange(utilization));
    }
    model.validate()?;
    let dynamic = model.p_max - model.p_idle;
    Ok(model.p_idle + dynamic * utilization.powf(model.exponent))
}

/// Trapezoidal integral of `(timestamp ms, watts)` points, in joules.
pub fn integrate_energy(points: &[(i64, f64)]) -> Result<f64, CollectorError> {
    if points.len() < 2 {
        return Err(CollectorError::InsufficientPoints(points.len()));
    }
    let mut joules = 0.0;
    for w in points.windows(2) {
        let ((t0, p0), (t1, p1)) = (w[0], w[1]);
        if t1 <= t0 {
            return Err(CollectorError::NonMonotonicTime { previous: t0, next: t1 });
        }
        joules += (t1 - t0) as f64 / 1000.0 * (p0 + p1) / 2.0;
    }
    Ok(joules)
}
