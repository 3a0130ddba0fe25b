use std::time::Duration;

/// Bounded exponential backoff: `attempts` tries, waiting `base * 2^i` after
/// the i-th failure (no wait after the last one).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    pub fn delay_after(&self, failure: u32) -> Duration {
        self.base * 2u32.saturating_pow(failure)
    }

    /// Delays slept between attempts.
    pub fn schedule(&self) -> Vec<Duration> {
        (0..self.attempts.saturating_sub(1)).map(|i| self.delay_after(i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule() {
        let p = RetryPolicy::default();
        assert_eq!(p.schedule(), vec![Duration::from_secs(1), Duration::from_secs(2)]);
        assert_eq!(p.delay_after(2), Duration::from_secs(4));
    }
}
