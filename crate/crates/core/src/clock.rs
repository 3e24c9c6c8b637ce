//! Time sources. Everything that reads the time or sleeps goes through
//! [`Clock`] so simulations and tests can run on a virtual clock.

use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use parking_lot::Mutex;

pub trait Clock: Send + Sync {
    /// Seconds since the Unix epoch, UTC.
    fn now(&self) -> f64;

    fn sleep(&self, d: Duration);
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> f64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0)
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Virtual clock. `sleep` advances time instantly and is recorded.
#[derive(Debug, Clone, Default)]
pub struct ManualClock {
    inner: Arc<Mutex<ManualState>>,
}

#[derive(Debug, Default)]
struct ManualState {
    now: f64,
    sleeps: Vec<Duration>,
}

impl ManualClock {
    pub fn new(start: f64) -> Self {
        Self {
            inner: Arc::new(Mutex::new(ManualState {
                now: start,
                sleeps: Vec::new(),
            })),
        }
    }

    pub fn set(&self, now: f64) {
        self.inner.lock().now = now;
    }

    pub fn advance(&self, secs: f64) {
        self.inner.lock().now += secs;
    }

    pub fn sleeps(&self) -> Vec<Duration> {
        self.inner.lock().sleeps.clone()
    }
}

impl Clock for ManualClock {
    fn now(&self) -> f64 {
        self.inner.lock().now
    }

    fn sleep(&self, d: Duration) {
        let mut s = self.inner.lock();
        s.now += d.as_secs_f64();
        s.sleeps.push(d);
    }
}
