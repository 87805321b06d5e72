//! Heart-beat negotiation and timing.
//!
//! Each side of a connection advertises `(can-send, want-to-receive)` in
//! milliseconds, zero meaning "none". The effective interval in each
//! direction is the MAX of what the sender can do and what the receiver
//! wants, and the direction is disabled unless both are positive.

use std::time::{Duration, Instant};

/// Applies the MAX rule to the client's `(cx, cy)` and server's `(sx, sy)`
/// advertisements. Returns `(send_interval_ms, receive_timeout_ms)` from the
/// client's point of view, zero meaning disabled.
pub fn negotiate(client: (u32, u32), server: (u32, u32)) -> (u32, u32) {
    let (cx, cy) = client;
    let (sx, sy) = server;
    let send = if cx > 0 && sy > 0 { cx.max(sy) } else { 0 };
    let recv = if cy > 0 && sx > 0 { cy.max(sx) } else { 0 };
    (send, recv)
}

/// Tracks when a heart-beat is owed and when the peer has gone quiet.
///
/// Driven entirely by caller-supplied instants, so tests can run it against
/// a synthetic clock.
#[derive(Debug, Clone)]
pub struct HeartbeatTimer {
    send_interval: Option<Duration>,
    recv_timeout: Option<Duration>,
    last_sent: Instant,
    last_received: Instant,
}

impl HeartbeatTimer {
    /// Builds a timer from negotiated intervals in milliseconds.
    pub fn new(send_interval_ms: u32, recv_timeout_ms: u32, now: Instant) -> Self {
        let nonzero = |ms: u32| (ms > 0).then(|| Duration::from_millis(ms.into()));
        HeartbeatTimer {
            send_interval: nonzero(send_interval_ms),
            recv_timeout: nonzero(recv_timeout_ms),
            last_sent: now,
            last_received: now,
        }
    }

    pub fn on_sent(&mut self, now: Instant) {
        self.last_sent = now;
    }

    pub fn on_received(&mut self, now: Instant) {
        self.last_received = now;
    }

    /// True when the negotiated send interval has fully elapsed since the
    /// last transmitted byte.
    pub fn send_due(&self, now: Instant) -> bool {
        self.send_interval.is_some_and(|i| now.duration_since(self.last_sent) >= i)
    }

    /// True when the peer has been silent past the receive timeout.
    pub fn receive_overdue(&self, now: Instant) -> bool {
        self.recv_timeout.is_some_and(|t| now.duration_since(self.last_received) > t)
    }

    /// Time until the next deadline of either kind, used to bound blocking
    /// reads. `None` when heart-beating is disabled in both directions.
    pub fn next_deadline(&self, _now: Instant) -> Option<Instant> {
        let send = self.send_interval.map(|i| self.last_sent + i);
        let recv = self.recv_timeout.map(|t| self.last_received + t);
        match (send, recv) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }
}
