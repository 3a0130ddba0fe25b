use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlertState {
    Inactive,
    Pending,
    Firing,
    Resolved,
}

impl AlertState {
    pub fn as_str(self) -> &'static str {
        match self {
            AlertState::Inactive => "inactive",
            AlertState::Pending => "pending",
            AlertState::Firing => "firing",
            AlertState::Resolved => "resolved",
        }
    }

    /// Only entering these states sends a notification.
    pub fn notifies(self) -> bool {
        matches!(self, AlertState::Firing | AlertState::Resolved)
    }
}

impl fmt::Display for AlertState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Whether `from -> to` is an allowed state change. A zero `for_duration`
/// collapses the pending stage, so inactive may go straight to firing.
pub fn is_legal(from: AlertState, to: AlertState, for_duration_ms: i64) -> bool {
    use AlertState::*;
    matches!(
        (from, to),
        (Inactive, Pending) | (Pending, Firing) | (Firing, Resolved) | (Resolved, Inactive) | (Pending, Inactive)
    ) || (from == Inactive && to == Firing && for_duration_ms == 0)
}

/// One evaluation step. `since` is when the current state was entered.
pub fn next_state(current: AlertState, since: i64, condition: bool, now: i64, for_duration_ms: i64) -> AlertState {
    use AlertState::*;
    match (current, condition) {
        (Inactive, true) if for_duration_ms == 0 => Firing,
        (Inactive, true) => Pending,
        (Inactive, false) => Inactive,
        (Pending, true) if now - since >= for_duration_ms => Firing,
        (Pending, true) => Pending,
        (Pending, false) => Inactive,
        (Firing, true) => Firing,
        (Firing, false) => Resolved,
        (Resolved, _) => Inactive,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use AlertState::*;

    #[test]
    fn lifecycle_examples() {
        assert_eq!(next_state(Inactive, 0, true, 0, 60_000), Pending);
        assert_eq!(next_state(Pending, 0, true, 30_000, 60_000), Pending);
        assert_eq!(next_state(Pending, 0, true, 60_000, 60_000), Firing);
        assert_eq!(next_state(Firing, 60_000, false, 75_000, 60_000), Resolved);
        assert_eq!(next_state(Resolved, 75_000, false, 90_000, 60_000), Inactive);
        assert_eq!(next_state(Pending, 0, false, 15_000, 60_000), Inactive);
        assert_eq!(next_state(Inactive, 0, true, 0, 0), Firing);
    }

    proptest! {
        #[test]
        fn only_legal_transitions(
            conds in prop::collection::vec(any::<bool>(), 1..200),
            for_steps in 0i64..5,
        ) {
            let step = 15_000;
            let for_duration = for_steps * step;
            let (mut state, mut since) = (Inactive, 0);
            let (mut firing, mut resolved) = (0usize, 0usize);
            for (i, c) in conds.iter().enumerate() {
                let now = i as i64 * step;
                let next = next_state(state, since, *c, now, for_duration);
                if next != state {
                    prop_assert!(is_legal(state, next, for_duration), "{state} -> {next}");
                    since = now;
                    match next {
                        Firing => firing += 1,
                        Resolved => resolved += 1,
                        _ => {}
                    }
                }
                state = next;
            }
            prop_assert!(firing == resolved || firing == resolved + 1);
        }
    }
}
