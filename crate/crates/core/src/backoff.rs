//! Capped exponential backoff for reconnect and retry loops.

use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

/// Delay generator: starts at `initial`, multiplies per failure, never
/// exceeds `max`. Reset on success.
#[derive(Debug, Clone)]
pub struct Backoff {
    initial: Duration,
    max: Duration,
    multiplier: f64,
    next: Option<Duration>,
    last_returned: Option<Duration>,
}

impl Backoff {
    pub fn new(initial: Duration, max: Duration) -> Self {
        Backoff::with_multiplier(initial, max, 2.0)
    }

    pub fn with_multiplier(initial: Duration, max: Duration, multiplier: f64) -> Self {
        Backoff {
            initial,
            max: max.max(initial),
            multiplier: multiplier.max(1.0),
            next: None,
            last_returned: None,
        }
    }

    /// Delay to wait before the next attempt.
    pub fn next_delay(&mut self) -> Duration {
        let delay = self.next.unwrap_or(self.initial).min(self.max);
        let grown = Duration::from_secs_f64(delay.as_secs_f64() * self.multiplier);
        self.next = Some(grown.min(self.max));
        self.last_returned = Some(delay);
        delay
    }

    /// True once a full maximum-length delay has been handed out; the
    /// ladder has been climbed to the top.
    pub fn exhausted(&self) -> bool {
        self.last_returned.is_some_and(|d| d >= self.max)
    }

    pub fn reset(&mut self) {
        self.next = None;
        self.last_returned = None;
    }
}

/// Sleeps in small slices so a raised stop flag cuts the wait short.
pub fn sleep_interruptible(total: Duration, stop: &AtomicBool) {
    let deadline = Instant::now() + total;
    while Instant::now() < deadline && !stop.load(Ordering::Relaxed) {
        let left = deadline.saturating_duration_since(Instant::now());
        std::thread::sleep(left.min(Duration::from_millis(25)));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delays_are_nondecreasing_and_capped() {
        let mut b = Backoff::new(Duration::from_millis(100), Duration::from_millis(1500));
        let mut last = Duration::ZERO;
        for _ in 0..12 {
            let d = b.next_delay();
            assert!(d >= last, "sequence must be non-decreasing");
            assert!(d <= Duration::from_millis(1500));
            last = d;
        }
        assert_eq!(last, Duration::from_millis(1500));
        assert!(b.exhausted());
    }

    #[test]
    fn exhaustion_requires_one_full_max_delay() {
        let mut b = Backoff::new(Duration::from_secs(1), Duration::from_secs(4));
        assert!(!b.exhausted());
        assert_eq!(b.next_delay(), Duration::from_secs(1));
        assert_eq!(b.next_delay(), Duration::from_secs(2));
        assert!(!b.exhausted());
        assert_eq!(b.next_delay(), Duration::from_secs(4));
        assert!(b.exhausted());
    }

    #[test]
    fn doubling_sequence_from_initial() {
        let mut b = Backoff::new(Duration::from_secs(1), Duration::from_secs(60));
        let delays: Vec<u64> = (0..7).map(|_| b.next_delay().as_secs()).collect();
        assert_eq!(delays, vec![1, 2, 4, 8, 16, 32, 60]);
    }

    #[test]
    fn reset_returns_to_initial() {
        let mut b = Backoff::new(Duration::from_secs(1), Duration::from_secs(8));
        b.next_delay();
        b.next_delay();
        b.reset();
        assert_eq!(b.next_delay(), Duration::from_secs(1));
        assert!(!b.exhausted());
    }
}
