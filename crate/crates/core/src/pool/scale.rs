//! The sizing rule of a server pool, as a pure function.

use std::time::Duration;

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Policy {
    /// Dispatch only in windows opening every `interval` after the pool
    /// starts; a window closes once the queue is drained.
    Periodic {
        #[serde(with = "millis")]
        interval: Duration,
    },
    /// Dispatch whenever messages are present.
    Event,
    /// Grow beyond the minimum only once `threshold` messages are queued.
    Batch { threshold: u64 },
}

mod millis {
    use std::time::Duration;

    pub fn serialize<S: serde::Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ScalingDecision {
    None,
    Grow(u32),
    Shrink(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScaleInput {
    pub depth: u64,
    pub busy: u32,
    /// Servers not already retiring.
    pub current: u32,
    /// Idle servers whose idle time has reached the shrink threshold.
    pub idle_expired: u32,
    pub min: u32,
    pub max: u32,
    pub policy: Policy,
}

/// Grow when more messages are visible than servers are busy, by
/// `min(depth - busy, max - current)`. Below `min` the pool is first
/// brought up to `min`. Otherwise shrink by the number of servers idle past
/// the threshold, never below `min`, or back down to `max` after a
/// redefinition lowered it.
pub fn scale_tick(i: ScaleInput) -> ScalingDecision {
    let mut grow = 0u64;
    if i.depth > i.busy as u64 && i.current < i.max {
        let gated = match i.policy {
            Policy::Batch { threshold } => i.current <= i.min && i.depth < threshold,
            Policy::Event | Policy::Periodic { .. } => false,
        };
        if !gated {
            grow = (i.depth - i.busy as u64).min((i.max - i.current) as u64);
        }
    }
    if i.current < i.min {
        grow = grow.max((i.min - i.current) as u64);
    }
    if grow > 0 {
        return ScalingDecision::Grow(grow as u32);
    }
    if i.current > i.max {
        return ScalingDecision::Shrink(i.current - i.max);
    }
    if i.idle_expired > 0 && i.current > i.min {
        return ScalingDecision::Shrink(i.idle_expired.min(i.current - i.min));
    }
    ScalingDecision::None
}

/// Index of the periodic window containing `now`, counting from `t0`.
pub fn window_index(now: Duration, t0: Duration, interval: Duration) -> u64 {
    if now < t0 || interval.is_zero() {
        return 0;
    }
    ((now - t0).as_nanos() / interval.as_nanos()) as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(depth: u64, busy: u32, current: u32, min: u32, max: u32) -> ScaleInput {
        ScaleInput { depth, busy, current, idle_expired: 0, min, max, policy: Policy::Event }
    }

    #[test]
    fn grows_by_capped_demand() {
        assert_eq!(scale_tick(input(10, 2, 2, 2, 5)), ScalingDecision::Grow(3));
    }

    #[test]
    fn shrinks_toward_min() {
        let i = ScaleInput { idle_expired: 4, ..input(0, 0, 4, 2, 6) };
        assert_eq!(scale_tick(i), ScalingDecision::Shrink(2));
    }

    #[test]
    fn batch_gates_first_growth() {
        let i = ScaleInput { policy: Policy::Batch { threshold: 5 }, ..input(3, 0, 1, 1, 4) };
        assert_eq!(scale_tick(i), ScalingDecision::None);
        let i = ScaleInput { depth: 5, ..i };
        assert_eq!(scale_tick(i), ScalingDecision::Grow(3));
    }

    #[test]
    fn window_boundaries() {
        let s = Duration::from_secs;
        assert_eq!(window_index(s(0), s(0), s(10)), 0);
        assert_eq!(window_index(s(9), s(0), s(10)), 0);
        assert_eq!(window_index(s(10), s(0), s(10)), 1);
        assert_eq!(window_index(s(25), s(5), s(10)), 2);
    }
}
