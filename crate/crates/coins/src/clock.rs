//! Virtual clocks. Services read time only through [`Clock`].

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use coins_core::Micros;

pub trait Clock: Send + Sync {
    fn now(&self) -> Micros;

    /// Wall time corresponding to `virt` microseconds of virtual time.
    fn wall(&self, virt: Micros) -> Duration;

    /// Blocks for `virt` of virtual time.
    fn sleep(&self, virt: Micros) {
        std::thread::sleep(self.wall(virt));
    }
}

/// Virtual time running `factor` times faster than wall time.
#[derive(Debug)]
pub struct ScaledClock {
    start: Instant,
    factor: f64,
}

/// Fast mode runs a hundred virtual seconds per wall second.
pub const FAST_FACTOR: f64 = 100.0;

impl ScaledClock {
    pub fn new(factor: f64) -> Self {
        assert!(
            factor > 0.0 && factor.is_finite(),
            "time factor must be positive"
        );
        Self {
            start: Instant::now(),
            factor,
        }
    }

    pub fn fast() -> Self {
        Self::new(FAST_FACTOR)
    }
}

impl Clock for ScaledClock {
    fn now(&self) -> Micros {
        (self.start.elapsed().as_secs_f64() * 1e6 * self.factor) as Micros
    }

    fn wall(&self, virt: Micros) -> Duration {
        Duration::from_secs_f64(virt as f64 / 1e6 / self.factor)
    }
}

/// Time advanced only by [`ManualClock::advance`].
#[derive(Debug, Default, Clone)]
pub struct ManualClock(Arc<AtomicU64>);

impl ManualClock {
    pub fn new(start: Micros) -> Self {
        Self(Arc::new(AtomicU64::new(start)))
    }

    pub fn advance(&self, by: Micros) {
        self.0.fetch_add(by, Ordering::SeqCst);
    }

    pub fn set(&self, t: Micros) {
        self.0.store(t, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Micros {
        self.0.load(Ordering::SeqCst)
    }

    fn wall(&self, _virt: Micros) -> Duration {
        Duration::ZERO
    }

    /// Yields briefly so polling loops do not spin.
    fn sleep(&self, _virt: Micros) {
        std::thread::sleep(Duration::from_millis(1));
    }
}
