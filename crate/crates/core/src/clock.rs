use std::time::{SystemTime, UNIX_EPOCH};

pub const SECOND_MS: i64 = 1_000;
pub const MINUTE_MS: i64 = 60 * SECOND_MS;
pub const HOUR_MS: i64 = 60 * MINUTE_MS;
pub const DAY_MS: i64 = 24 * HOUR_MS;

/// Wall-clock milliseconds since the Unix epoch.
pub fn now_ms() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(0)
}

pub fn align_down(t: i64, step: i64) -> i64 {
    t.div_euclid(step) * step
}

pub fn align_up(t: i64, step: i64) -> i64 {
    let down = align_down(t, step);
    if down == t {
        t
    } else {
        down + step
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alignment() {
        assert_eq!(align_down(61_000, MINUTE_MS), 60_000);
        assert_eq!(align_up(61_000, MINUTE_MS), 120_000);
        assert_eq!(align_up(120_000, MINUTE_MS), 120_000);
        assert_eq!(align_down(-1, MINUTE_MS), -MINUTE_MS);
    }
}
