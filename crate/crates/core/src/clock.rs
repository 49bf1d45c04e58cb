use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

/// Time source for traces. Tests use [`FixedClock`] so traces are
/// byte-reproducible.
pub trait Clock: Send + Sync {
    fn unix_millis(&self) -> u64;
    fn monotonic(&self) -> Duration;
}

#[derive(Debug, Clone)]
pub struct SystemClock {
    origin: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        Self {
            origin: Instant::now(),
        }
    }
}

impl Clock for SystemClock {
    fn unix_millis(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }

    fn monotonic(&self) -> Duration {
        self.origin.elapsed()
    }
}

/// A clock frozen at one instant.
#[derive(Debug, Clone, Copy, Default)]
pub struct FixedClock {
    pub unix_millis: u64,
}

impl Clock for FixedClock {
    fn unix_millis(&self) -> u64 {
        self.unix_millis
    }

    fn monotonic(&self) -> Duration {
        Duration::ZERO
    }
}
