//! Epoch-anchored clocks: a wall clock for live replay and a virtual clock
//! for simulation.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

/// Microseconds since the Unix epoch, monotonic for the life of the clock.
pub trait Clock: Send + Sync {
    fn now_us(&self) -> u64;

    /// Block until `now_us() >= abs_us`. Returns immediately for past
    /// targets.
    fn sleep_until(&self, abs_us: u64);
}

/// Wall clock anchored to the system time once, then driven by the
/// monotonic [`Instant`] so it never steps backwards.
#[derive(Debug, Clone)]
pub struct SystemClock {
    anchor_epoch_us: u64,
    anchor: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        let anchor = Instant::now();
        let anchor_epoch_us = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_micros() as u64)
            .unwrap_or(0);
        SystemClock {
            anchor_epoch_us,
            anchor,
        }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

// Below this the remaining wait is spun instead of slept; thread::sleep
// routinely overshoots by tens of microseconds.
const SPIN_THRESHOLD_US: u64 = 200;

impl Clock for SystemClock {
    fn now_us(&self) -> u64 {
        self.anchor_epoch_us + self.anchor.elapsed().as_micros() as u64
    }

    fn sleep_until(&self, abs_us: u64) {
        loop {
            let now = self.now_us();
            if now >= abs_us {
                return;
            }
            let remaining = abs_us - now;
            if remaining > SPIN_THRESHOLD_US {
                thread::sleep(Duration::from_micros(remaining - SPIN_THRESHOLD_US));
            } else {
                std::hint::spin_loop();
            }
        }
    }
}

/// Discrete virtual time. Sleeping jumps the clock to the target.
#[derive(Debug, Clone)]
pub struct VirtualClock {
    now: Arc<AtomicU64>,
}

impl VirtualClock {
    pub fn new(start_us: u64) -> Self {
        VirtualClock {
            now: Arc::new(AtomicU64::new(start_us)),
        }
    }

    /// Move time forward to `abs_us`; never moves backwards.
    pub fn advance_to(&self, abs_us: u64) {
        self.now.fetch_max(abs_us, Ordering::AcqRel);
    }

    pub fn advance_by(&self, us: u64) {
        self.now.fetch_add(us, Ordering::AcqRel);
    }
}

impl Clock for VirtualClock {
    fn now_us(&self) -> u64 {
        self.now.load(Ordering::Acquire)
    }

    fn sleep_until(&self, abs_us: u64) {
        self.advance_to(abs_us);
    }
}
