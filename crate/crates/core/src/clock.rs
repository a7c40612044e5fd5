//! Wall and virtual clocks. All governance timestamps are UTC milliseconds.

use chrono::{DateTime, SecondsFormat, Utc};
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Milliseconds since the Unix epoch, UTC.
pub type Millis = i64;

pub trait Clock: Send + Sync {
    fn now_ms(&self) -> Millis;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> Millis {
        Utc::now().timestamp_millis()
    }
}

/// Deterministic clock for tests and the evaluation harness.
///
/// Time only moves through [`VirtualClock::advance`], plus an optional seeded
/// jitter applied on every read so that in-gateway latency measurements see a
/// realistic (but reproducible) passage of time.
pub struct VirtualClock {
    inner: Mutex<VirtualState>,
}

struct VirtualState {
    now: Millis,
    jitter_max_ms: i64,
    rng: ChaCha8Rng,
}

impl VirtualClock {
    pub fn new(start: Millis) -> Self {
        Self::with_jitter(start, 0, 0)
    }

    pub fn with_jitter(start: Millis, jitter_max_ms: i64, seed: u64) -> Self {
        Self {
            inner: Mutex::new(VirtualState {
                now: start,
                jitter_max_ms: jitter_max_ms.max(0),
                rng: ChaCha8Rng::seed_from_u64(seed),
            }),
        }
    }

    pub fn advance(&self, ms: i64) {
        self.inner.lock().now += ms.max(0);
    }

    pub fn set(&self, now: Millis) {
        let mut st = self.inner.lock();
        if now > st.now {
            st.now = now;
        }
    }

    /// Current time without consuming jitter.
    pub fn peek(&self) -> Millis {
        self.inner.lock().now
    }
}

impl Clock for VirtualClock {
    fn now_ms(&self) -> Millis {
        let mut st = self.inner.lock();
        if st.jitter_max_ms > 0 {
            let max = st.jitter_max_ms;
            let step = st.rng.gen_range(0..=max);
            st.now += step;
        }
        st.now
    }
}

/// 2026-01-01T00:00:00Z, the default epoch for virtual clocks.
pub const HARNESS_EPOCH_MS: Millis = 1_767_225_600_000;

/// RFC 3339 with millisecond precision, always `Z`.
pub fn format_rfc3339(ms: Millis) -> String {
    DateTime::<Utc>::from_timestamp_millis(ms)
        .unwrap_or_default()
        .to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub fn parse_rfc3339(ts: &str) -> Option<Millis> {
    DateTime::parse_from_rfc3339(ts)
        .ok()
        .map(|dt| dt.with_timezone(&Utc).timestamp_millis())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rfc3339_round_trip() {
        let ts = format_rfc3339(HARNESS_EPOCH_MS + 1234);
        assert_eq!(ts, "2026-01-01T00:00:01.234Z");
        assert_eq!(parse_rfc3339(&ts), Some(HARNESS_EPOCH_MS + 1234));
    }

    #[test]
    fn virtual_clock_is_reproducible() {
        let a = VirtualClock::with_jitter(0, 5, 42);
        let b = VirtualClock::with_jitter(0, 5, 42);
        let xs: Vec<_> = (0..20).map(|_| a.now_ms()).collect();
        let ys: Vec<_> = (0..20).map(|_| b.now_ms()).collect();
        assert_eq!(xs, ys);
        assert!(xs.windows(2).all(|w| w[0] <= w[1]));
    }
}
