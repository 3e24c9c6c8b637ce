use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clock::Clock;

/// How a failed attempt should be treated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RetryHint {
    Fatal,
    Backoff,
    /// Server-advised delay.
    After(Duration),
}

pub trait Retryable {
    fn retry_hint(&self) -> RetryHint;
}

/// Exponential backoff with jitter and an overall deadline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub base_delay_ms: u64,
    pub factor: f64,
    pub max_attempts: u32,
    pub jitter: bool,
    pub deadline_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            base_delay_ms: 500,
            factor: 2.0,
            max_attempts: 4,
            jitter: true,
            deadline_ms: 30_000,
        }
    }
}

#[derive(Debug)]
pub struct RetryFailure<E> {
    pub attempts: u32,
    pub last: E,
    pub deadline_exceeded: bool,
}

impl RetryPolicy {
    /// Delay before attempt `failed + 1`, without jitter.
    pub fn backoff(&self, failed: u32) -> Duration {
        let exp = self.factor.powi(failed.saturating_sub(1) as i32);
        Duration::from_secs_f64(self.base_delay_ms as f64 * exp / 1000.0)
    }

    fn jittered(&self, d: Duration) -> Duration {
        if !self.jitter {
            return d;
        }
        // equal jitter: keep at least half the nominal delay
        d.mul_f64(rand::rng().random_range(0.5..=1.0))
    }

    /// Runs `op` until it succeeds, fails fatally, exhausts the attempt
    /// budget, or the next wait would cross the deadline. `op` receives the
    /// 1-based attempt number.
    pub fn run<T, E: Retryable>(
        &self,
        clock: &dyn Clock,
        mut op: impl FnMut(u32) -> Result<T, E>,
    ) -> Result<(T, u32), RetryFailure<E>> {
        let started = clock.now();
        let deadline = self.deadline_ms as f64 / 1000.0;
        let max = self.max_attempts.max(1);
        let mut attempt = 1;
        loop {
            let err = match op(attempt) {
                Ok(v) => return Ok((v, attempt)),
                Err(e) => e,
            };
            let wait = match err.retry_hint() {
                RetryHint::Fatal => None,
                RetryHint::Backoff => Some(self.jittered(self.backoff(attempt))),
                RetryHint::After(d) => Some(d),
            };
            let Some(wait) = wait else {
                return Err(RetryFailure {
                    attempts: attempt,
                    last: err,
                    deadline_exceeded: false,
                });
            };
            if attempt >= max {
                return Err(RetryFailure {
                    attempts: attempt,
                    last: err,
                    deadline_exceeded: false,
                });
            }
            if clock.now() - started + wait.as_secs_f64() > deadline {
                return Err(RetryFailure {
                    attempts: attempt,
                    last: err,
                    deadline_exceeded: true,
                });
            }
            clock.sleep(wait);
            attempt += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;

    #[derive(Debug, PartialEq)]
    struct E(RetryHint);

    impl Retryable for E {
        fn retry_hint(&self) -> RetryHint {
            self.0
        }
    }

    fn fixed() -> RetryPolicy {
        RetryPolicy {
            jitter: false,
            ..RetryPolicy::default()
        }
    }

    #[test]
    fn backoff_doubles_from_base() {
        let p = fixed();
        let ms: Vec<u128> = (1..=3).map(|n| p.backoff(n).as_millis()).collect();
        assert_eq!(ms, [500, 1000, 2000]);
    }

    #[test]
    fn succeeds_after_transient_failures() {
        let clock = ManualClock::new(0.0);
        let (v, attempts) = fixed()
            .run(&clock, |n| if n < 3 { Err(E(RetryHint::Backoff)) } else { Ok(n) })
            .unwrap();
        assert_eq!((v, attempts), (3, 3));
        assert_eq!(
            clock.sleeps(),
            [Duration::from_millis(500), Duration::from_millis(1000)]
        );
    }

    #[test]
    fn gives_up_after_max_attempts() {
        let clock = ManualClock::new(0.0);
        let err = fixed()
            .run(&clock, |_| Err::<(), _>(E(RetryHint::Backoff)))
            .unwrap_err();
        assert_eq!(err.attempts, 4);
        assert!(!err.deadline_exceeded);
    }

    #[test]
    fn fatal_is_not_retried() {
        let clock = ManualClock::new(0.0);
        let err = fixed().run(&clock, |_| Err::<(), _>(E(RetryHint::Fatal))).unwrap_err();
        assert_eq!(err.attempts, 1);
        assert!(clock.sleeps().is_empty());
    }

    #[test]
    fn server_advised_delay_and_deadline() {
        let clock = ManualClock::new(0.0);
        let policy = RetryPolicy {
            deadline_ms: 5_000,
            ..fixed()
        };
        let err = policy
            .run(&clock, |_| Err::<(), _>(E(RetryHint::After(Duration::from_secs(3)))))
            .unwrap_err();
        assert_eq!(err.attempts, 2);
        assert!(err.deadline_exceeded);
        assert_eq!(clock.sleeps(), [Duration::from_secs(3)]);
    }

    #[test]
    fn jitter_stays_within_half_to_full() {
        let p = RetryPolicy::default();
        for _ in 0..100 {
            let d = p.jittered(Duration::from_millis(1000)).as_millis();
            assert!((500..=1000).contains(&d));
        }
    }
}
