use super::AnalyticsError;

/// Pearson correlation of two equally long sequences, clamped to [-1, 1].
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64, AnalyticsError> {
    let n = a.len().min(b.len());
    if n < 3 {
        return Err(AnalyticsError::InsufficientOverlap(n));
    }
    let (a, b) = (&a[..n], &b[..n]);
    let mean_a = a.iter().sum::<f64>() / n as f64;
    let mean_b = b.iter().sum::<f64>() / n as f64;
    let (mut cov, mut var_a, mut var_b) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - mean_a, y - mean_b);
        cov += dx * dy;
        var_a += dx * dx;
        var_b += dy * dy;
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Err(AnalyticsError::ZeroVariance);
    }
    Ok((cov / (var_a * var_b).sqrt()).clamp(-1.0, 1.0))
}

/// Joins two bucketed series on bucket start, dropping buckets missing in
/// either one.
pub fn align_buckets(a: &[(i64, f64)], b: &[(i64, f64)]) -> (Vec<f64>, Vec<f64>) {
    let (mut i, mut j) = (0, 0);
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                xs.push(a[i].1);
                ys.push(b[j].1);
                i += 1;
                j += 1;
            }
        }
    }
    (xs, ys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Textbook two-pass formula written out independently.
    fn oracle(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let da: f64 = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>().sqrt();
        let db: f64 = b.iter().map(|y| (y - mb).powi(2)).sum::<f64>().sqrt();
        num / (da * db)
    }

    #[test]
    fn examples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(pearson(&a, &a).unwrap(), 1.0);
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        assert_eq!(pearson(&a, &neg).unwrap(), -1.0);
        let b = [2.0, 4.0, 7.0, 8.0];
        let r = pearson(&a, &b).unwrap();
        // 10.5 / sqrt(5 * 22.75), about 0.9845
        assert!((r - 0.984_495_185).abs() < 1e-9, "{r}");
        assert!((r - oracle(&a, &b)).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        assert!(matches!(pearson(&[1.0, 2.0], &[1.0, 2.0]), Err(AnalyticsError::InsufficientOverlap(2))));
        assert!(matches!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(AnalyticsError::ZeroVariance)));
    }

    #[test]
    fn alignment_drops_unpaired_buckets() {
        let (x, y) = align_buckets(&[(0, 1.0), (10, 2.0), (30, 3.0)], &[(10, 5.0), (20, 6.0), (30, 7.0)]);
        assert_eq!((x, y), (vec![2.0, 3.0], vec![5.0, 7.0]));
    }

    proptest! {
        #[test]
        fn symmetric_and_reflexive(
            pairs in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 3..50)
        ) {
            let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            if let (Ok(ab), Ok(ba)) = (pearson(&a, &b), pearson(&b, &a)) {
                prop_assert_eq!(ab, ba);
            }
            if let Ok(aa) = pearson(&a, &a) {
                prop_assert_eq!(aa, 1.0);
            }
        }
    }
}
