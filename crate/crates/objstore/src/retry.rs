use std::time::Duration;

use crate::{Appended, ObjectStore, StoreError, StoreResult};

/// Bounded retry with exponential backoff for transient append failures.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    /// First backoff; `None` uses the backend's base latency.
    pub initial_backoff: Option<Duration>,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            initial_backoff: None,
            multiplier: 2.0,
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        RetryPolicy {
            max_retries: 0,
            ..Default::default()
        }
    }
}

/// Appends with retries at the same expected offset.
///
/// A retry that finds the object already at `expected_offset + payload.len()`
/// is taken as proof that an earlier attempt landed and counts as success. The
/// returned `service_time` includes backoff waits.
pub fn append_with_retry(
    store: &dyn ObjectStore,
    key: &str,
    expected_offset: u64,
    payload: &[u8],
    policy: &RetryPolicy,
) -> StoreResult<Appended> {
    let target = expected_offset + payload.len() as u64;
    let mut backoff = policy.initial_backoff.unwrap_or_else(|| store.base_latency());
    let mut waited = Duration::ZERO;
    let mut attempt = 0;
    loop {
        match store.append(key, expected_offset, payload) {
            Ok(mut a) => {
                a.service_time += waited;
                return Ok(a);
            }
            Err(StoreError::OffsetMismatch { actual }) if attempt > 0 && actual == target => {
                return Ok(Appended {
                    new_length: actual,
                    service_time: waited,
                });
            }
            Err(e) if e.is_transient() && attempt < policy.max_retries => {
                log::warn!(
                    "append to {}/{key} at {expected_offset} failed ({e}), retry {} in {:?}",
                    store.bucket(),
                    attempt + 1,
                    backoff
                );
                store.pause(backoff);
                waited += backoff;
                backoff = Duration::from_secs_f64(backoff.as_secs_f64() * policy.multiplier);
                attempt += 1;
            }
            Err(e) if e.is_transient() => {
                return Err(StoreError::Unavailable(format!(
                    "{}/{key}: giving up after {} retries: {e}",
                    store.bucket(),
                    policy.max_retries
                )))
            }
            Err(e) => return Err(e),
        }
    }
}
