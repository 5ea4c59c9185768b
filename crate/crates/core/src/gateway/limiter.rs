use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

/// In-flight cap plus an optional token bucket refilled at `rate` per second
/// with a burst of one second's worth of tokens.
pub(super) struct Limiter {
    max_in_flight: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
    bucket: Option<Mutex<Bucket>>,
}

struct Bucket {
    rate: f64,
    tokens: f64,
    last: Instant,
}

pub(super) struct Permit<'a> {
    limiter: &'a Limiter,
}

impl Limiter {
    pub(super) fn new(max_in_flight: usize, rate: Option<f64>) -> Self {
        Limiter {
            max_in_flight: max_in_flight.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
            bucket: rate.map(|rate| Mutex::new(Bucket { rate, tokens: rate.max(1.0), last: Instant::now() })),
        }
    }

    pub(super) fn acquire(&self) -> Permit<'_> {
        {
            let mut n = self.in_flight.lock().unwrap();
            while *n >= self.max_in_flight {
                n = self.freed.wait(n).unwrap();
            }
            *n += 1;
        }
        if let Some(bucket) = &self.bucket {
            loop {
                let wait = {
                    let mut b = bucket.lock().unwrap();
                    let now = Instant::now();
                    let refill = now.duration_since(b.last).as_secs_f64() * b.rate;
                    b.tokens = (b.tokens + refill).min(b.rate.max(1.0));
                    b.last = now;
                    if b.tokens >= 1.0 {
                        b.tokens -= 1.0;
                        None
                    } else {
                        Some(Duration::from_secs_f64((1.0 - b.tokens) / b.rate))
                    }
                };
                match wait {
                    None => break,
                    Some(d) => std::thread::sleep(d),
                }
            }
        }
        Permit { limiter: self }
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.limiter.in_flight.lock().unwrap();
        *n -= 1;
        self.limiter.freed.notify_one();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn in_flight_never_exceeds_cap() {
        let limiter = Limiter::new(2, None);
        let current = AtomicUsize::new(0);
        let peak = AtomicUsize::new(0);
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| {
                    let _p = limiter.acquire();
                    let now = current.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(5));
                    current.fetch_sub(1, Ordering::SeqCst);
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }

    #[test]
    fn token_bucket_spaces_requests() {
        let limiter = Limiter::new(4, Some(50.0));
        let start = Instant::now();
        for _ in 0..60 {
            drop(limiter.acquire());
        }
        // 50 burst tokens, then 10 more at 50/s.
        assert!(start.elapsed() >= Duration::from_millis(150));
    }
}
