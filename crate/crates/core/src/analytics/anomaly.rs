use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::AnalyticsError;
use crate::model::SeriesKey;

const MAD_SCALE: f64 = 0.6745;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnomalyParams {
    pub window_points: usize,
    pub threshold_k: f64,
    pub min_mad_epsilon: f64,
}

impl Default for AnomalyParams {
    fn default() -> Self {
        AnomalyParams {
            window_points: 60,
            threshold_k: 3.5,
            min_mad_epsilon: 1e-12,
        }
    }
}

impl AnomalyParams {
    pub fn validate(&self) -> Result<(), AnalyticsError> {
        if self.window_points < 8 {
            return Err(AnalyticsError::InvalidParams(format!(
                "window_points must be at least 8, got {}",
                self.window_points
            )));
        }
        if !(self.threshold_k > 0.0) {
            return Err(AnalyticsError::InvalidParams(format!(
                "threshold_k must be positive, got {}",
                self.threshold_k
            )));
        }
        if !(self.min_mad_epsilon > 0.0) {
            return Err(AnalyticsError::InvalidParams("min_mad_epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalySpan {
    pub key: SeriesKey,
    pub start: i64,
    pub end: i64,
    pub peak_score: f64,
    pub onset: i64,
}

/// Median of `values`; the mean of the two middle elements for even lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    median_in_place(&mut v)
}

fn median_in_place(v: &mut [f64]) -> f64 {
    let n = v.len();
    let mid = n / 2;
    let (_, upper, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if n % 2 == 1 {
        upper
    } else {
        let lower = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lower + upper) / 2.0
    }
}

/// Modified z-score of `x` against `window`, signed.
pub fn robust_zscore(window: &[f64], x: f64, min_mad_epsilon: f64) -> Result<f64, AnalyticsError> {
    if window.len() < 8 {
        return Err(AnalyticsError::WindowTooSmall(window.len()));
    }
    let mut buf = window.to_vec();
    let med = median_in_place(&mut buf);
    for (d, w) in buf.iter_mut().zip(window) {
        *d = (w - med).abs();
    }
    let mad = median_in_place(&mut buf);
    Ok(MAD_SCALE * (x - med) / mad.max(min_mad_epsilon))
}

/// Scores every point after the first `window_points` against a baseline
/// of the most recent `window_points` unflagged points. Flagged points stay
/// out of the baseline so a long spike cannot mask itself. A run of
/// `window_points` consecutive flagged points is taken as a level shift and
/// becomes the new baseline.
pub fn score_points(points: &[(i64, f64)], params: &AnomalyParams) -> Result<Vec<(i64, f64, bool)>, AnalyticsError> {
    params.validate()?;
    let w = params.window_points;
    if points.len() < w + 1 {
        return Err(AnalyticsError::InsufficientData {
            have: points.len(),
            need: w + 1,
        });
    }
    let mut baseline: VecDeque<f64> = points[..w].iter().map(|p| p.1).collect();
    let mut run: VecDeque<f64> = VecDeque::with_capacity(w);
    let mut out = Vec::with_capacity(points.len() - w);
    let mut window = Vec::with_capacity(w);
    for &(t, x) in &points[w..] {
        window.clear();
        window.extend(baseline.iter().copied());
        let score = robust_zscore(&window, x, params.min_mad_epsilon)?;
        let flagged = score.abs() > params.threshold_k;
        out.push((t, score, flagged));
        if flagged {
            run.push_back(x);
            if run.len() == w {
                baseline = std::mem::take(&mut run);
            }
        } else {
            run.clear();
            baseline.pop_front();
            baseline.push_back(x);
        }
    }
    Ok(out)
}

/// Merges consecutive flagged points into spans.
pub fn detect_spans(key: &SeriesKey, points: &[(i64, f64)], params: &AnomalyParams) -> Result<Vec<AnomalySpan>, AnalyticsError> {
    let mut spans = Vec::new();
    let mut current: Option<AnomalySpan> = None;
    for (t, score, flagged) in score_points(points, params)? {
        if flagged {
            match &mut current {
                Some(span) => {
                    span.end = t;
                    span.peak_score = span.peak_score.max(score.abs());
                }
                None => {
                    current = Some(AnomalySpan {
                        key: key.clone(),
                        start: t,
                        end: t,
                        peak_score: score.abs(),
                        onset: t,
                    })
                }
            }
        } else if let Some(span) = current.take() {
            spans.push(span);
        }
    }
    spans.extend(current);
    Ok(spans)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn key() -> SeriesKey {
        "lat".parse().unwrap()
    }

    #[test]
    fn zscore_examples() {
        assert_eq!(robust_zscore(&[5.0; 10], 5.0, 1e-12).unwrap(), 0.0);
        assert!(robust_zscore(&[5.0; 10], 6.0, 1e-12).unwrap() > 1e9);
        let w: Vec<f64> = (1..=9).map(f64::from).collect();
        let z = robust_zscore(&w, 11.0, 1e-12).unwrap();
        assert!((z - 2.0235).abs() < 1e-12, "{z}");
        assert!(robust_zscore(&w, -1.0, 1e-12).unwrap() < 0.0);
        assert!(matches!(robust_zscore(&[1.0; 7], 1.0, 1e-12), Err(AnalyticsError::WindowTooSmall(7))));
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn constant_series_has_no_spans() {
        let pts: Vec<(i64, f64)> = (0..200).map(|i| (i, 4.2)).collect();
        assert!(detect_spans(&key(), &pts, &AnomalyParams::default()).unwrap().is_empty());
    }

    #[test]
    fn masking_spike_is_one_span() {
        let pts: Vec<(i64, f64)> = (0..1000)
            .map(|i| (i * 60, if (600..650).contains(&i) { 3.0 } else { 0.1 }))
            .collect();
        let spans = detect_spans(&key(), &pts, &AnomalyParams::default()).unwrap();
        assert_eq!(spans.len(), 1);
        assert_eq!((spans[0].start, spans[0].end, spans[0].onset), (600 * 60, 649 * 60, 600 * 60));
        assert!(spans[0].peak_score >= 3.5);
    }

    #[test]
    fn level_shift_rebaselines() {
        let pts: Vec<(i64, f64)> = (0..300).map(|i| (i, if i < 100 { 1.0 } else { 9.0 })).collect();
        let spans = detect_spans(&key(), &pts, &AnomalyParams::default()).unwrap();
        assert_eq!(spans.len(), 1);
        assert_eq!((spans[0].start, spans[0].end), (100, 159));
    }

    #[test]
    fn too_short() {
        let pts: Vec<(i64, f64)> = (0..60).map(|i| (i, 1.0)).collect();
        assert!(matches!(
            detect_spans(&key(), &pts, &AnomalyParams::default()),
            Err(AnalyticsError::InsufficientData { have: 60, need: 61 })
        ));
    }

    proptest! {
        #[test]
        fn decision_is_affine_invariant(
            window in prop::collection::vec(-1e3f64..1e3, 8..40),
            x in -1e3f64..1e3,
            shift in -1e3f64..1e3,
            scale in 0.01f64..100.0,
        ) {
            let k = 3.5;
            let base = robust_zscore(&window, x, 1e-12).unwrap();
            let moved: Vec<f64> = window.iter().map(|w| w * scale + shift).collect();
            let other = robust_zscore(&moved, x * scale + shift, 1e-12).unwrap();
            // stay clear of the decision boundary where rounding could flip it
            prop_assume!((base.abs() - k).abs() > 1e-6 * k.max(base.abs()));
            prop_assume!(base.abs() < 1e6);
            prop_assert_eq!(base.abs() > k, other.abs() > k);
        }

        #[test]
        fn constant_never_flags(v in -1e6f64..1e6, n in 61usize..300) {
            let pts: Vec<(i64, f64)> = (0..n as i64).map(|i| (i, v)).collect();
            prop_assert!(detect_spans(&key(), &pts, &AnomalyParams::default()).unwrap().is_empty());
        }
    }
}
