use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

pub trait Clock: Send + Sync {
    /// Monotonic time since an arbitrary origin.
    fn now(&self) -> Duration;
    fn sleep(&self, d: Duration);
}

pub struct SystemClock {
    origin: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        SystemClock {
            origin: Instant::now(),
        }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Clock whose `sleep` advances time instantly.
#[derive(Default)]
pub struct FakeClock {
    nanos: AtomicU64,
}

impl FakeClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn advance(&self, d: Duration) {
        self.nanos.fetch_add(d.as_nanos() as u64, Ordering::SeqCst);
    }
}

impl Clock for FakeClock {
    fn now(&self) -> Duration {
        Duration::from_nanos(self.nanos.load(Ordering::SeqCst))
    }

    fn sleep(&self, d: Duration) {
        self.advance(d);
    }
}

pub const WINDOW: Duration = Duration::from_secs(60);

/// Admits at most `per_minute` calls in any 60-second window.
pub struct RateLimiter {
    per_minute: usize,
    log: Mutex<VecDeque<Duration>>,
}

impl RateLimiter {
    pub fn new(per_minute: u32) -> Self {
        RateLimiter {
            per_minute: per_minute.max(1) as usize,
            log: Mutex::new(VecDeque::new()),
        }
    }

    pub fn per_minute(&self) -> usize {
        self.per_minute
    }

    /// Blocks until a call is admitted; returns the admission time.
    pub fn acquire(&self, clock: &dyn Clock) -> Duration {
        loop {
            let wait = {
                let mut log = self.log.lock().unwrap();
                let now = clock.now();
                while log.front().is_some_and(|&t| t + WINDOW <= now) {
                    log.pop_front();
                }
                if log.len() < self.per_minute {
                    log.push_back(now);
                    return now;
                }
                *log.front().unwrap() + WINDOW - now
            };
            clock.sleep(wait);
        }
    }
}
