//! Injectable time source.

use core::sync::atomic::{AtomicU64, Ordering};
use core::time::Duration;

/// Monotonic time since an arbitrary origin.
pub trait Clock: Sync {
    fn now(&self) -> Duration;
}

/// A clock that never advances on its own.
///
/// Used for simulated runs, where deadlines are judged against modelled
/// costs rather than elapsed host time.
#[derive(Debug, Default, Clone, Copy)]
pub struct FrozenClock;

impl Clock for FrozenClock {
    fn now(&self) -> Duration {
        Duration::ZERO
    }
}

/// Manually stepped clock.
#[derive(Debug, Default)]
pub struct ManualClock {
    nanos: AtomicU64,
}

impl ManualClock {
    pub fn advance(&self, by: Duration) {
        self.nanos.fetch_add(by.as_nanos() as u64, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Duration {
        Duration::from_nanos(self.nanos.load(Ordering::SeqCst))
    }
}
