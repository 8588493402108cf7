//! Object storage backends for log segments and checkpoints.
//!
//! Every backend implements [`ObjectStore`], whose central operation is an
//! offset-checked append: the payload is applied only when the object's current
//! length equals the caller's expected offset. That check makes appends
//! idempotent under retry and lets a single writer per object detect lost or
//! duplicated requests.
//!
//! Three implementations are provided:
//!
//! * [`SimStore`]: in-memory objects with a piecewise request-size latency model
//!   (S3 Express One Zone and S3 Standard profiles).
//! * [`LocalDirStore`]: one file per object under `{root}/{bucket}/{key}`, with
//!   `fsync` before acknowledging.
//! * [`S3Store`]: an S3-compatible HTTP client that uses the write-offset header
//!   for appends.
//!
//! [`ReplicatedStore`] fans writes out to several buckets and acknowledges once
//! an all/majority policy is met.

mod cost;
mod error;
mod latency;
mod local;
mod replicate;
mod retry;
mod s3;
mod sim;

use std::ops::Range;
use std::time::Duration;

pub use cost::{estimate_cost, CostCounters, Pricing, RequestCounters};
pub use error::{StoreError, StoreResult};
pub use latency::{LatencyCurve, LatencyModel, OpKind, Profile, TailSpike};
pub use local::LocalDirStore;
pub use replicate::{AckPolicy, ReplicatedAck, ReplicatedStore, ReplicationPolicy};
pub use retry::{append_with_retry, RetryPolicy};
pub use s3::{S3Config, S3Store};
pub use sim::{FaultPlan, SimMode, SimStore};

/// S3's limit on the number of parts one object can receive through appends.
pub const DEFAULT_PART_LIMIT: u32 = 10_000;

/// Largest payload accepted by a single append or put.
pub const DEFAULT_MAX_PART_BYTES: u64 = 5 * 1024 * 1024 * 1024;

/// Outcome of a successful append.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Appended {
    /// Object length after the append.
    pub new_length: u64,
    /// Time the backend spent on the request. Simulated backends report the
    /// modeled latency here even when they do not sleep.
    pub service_time: Duration,
}

/// A fully qualified object name.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ObjectKey {
    pub bucket: String,
    pub key: String,
}

impl ObjectKey {
    pub fn new(bucket: impl Into<String>, key: impl Into<String>) -> StoreResult<Self> {
        let bucket = bucket.into();
        let key = key.into();
        if bucket.is_empty() || key.is_empty() {
            return Err(StoreError::InvalidKey(format!("{bucket}/{key}")));
        }
        Ok(ObjectKey { bucket, key })
    }
}

impl std::fmt::Display for ObjectKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.bucket, self.key)
    }
}

/// A bucket of objects addressed by key.
///
/// Implementations must be safe to call concurrently. Appends to one object are
/// linearizable: concurrent appends never interleave bytes.
pub trait ObjectStore: Send + Sync {
    /// Bucket name this store writes to.
    fn bucket(&self) -> &str;

    /// Appends `payload` iff the object's current length is `expected_offset`.
    /// An absent object is created when `expected_offset` is zero.
    fn append(&self, key: &str, expected_offset: u64, payload: &[u8]) -> StoreResult<Appended>;

    /// Reads the whole object, or exactly `range` of it.
    fn get(&self, key: &str, range: Option<Range<u64>>) -> StoreResult<Vec<u8>>;

    /// Current length of the object. Billed like a GET.
    fn size(&self, key: &str) -> StoreResult<u64>;

    /// Replaces the whole object and resets its part count.
    fn put(&self, key: &str, bytes: &[u8]) -> StoreResult<()>;

    /// Removes the object. Deleting an absent key succeeds.
    fn delete(&self, key: &str) -> StoreResult<()>;

    /// Keys starting with `prefix`, sorted.
    fn list(&self, prefix: &str) -> StoreResult<Vec<String>>;

    /// Request and byte counters accumulated since the store was created.
    fn counters(&self) -> CostCounters;

    /// Whether the backend supports appending to an existing object. Backends
    /// without it only accept appends that create an object at offset zero.
    fn supports_append(&self) -> bool {
        true
    }

    /// Typical latency of a small append; seeds retry backoff.
    fn base_latency(&self) -> Duration {
        Duration::from_millis(1)
    }

    /// Waits for `d` on this backend's clock. Simulated backends that do not
    /// model wall-clock time return immediately.
    fn pause(&self, d: Duration) {
        std::thread::sleep(d);
    }

    /// True when reported service times are modeled rather than observed, so
    /// completion order says nothing about which request was faster.
    fn modeled_time(&self) -> bool {
        false
    }
}

impl<T: ObjectStore + ?Sized> ObjectStore for std::sync::Arc<T> {
    fn bucket(&self) -> &str {
        (**self).bucket()
    }
    fn append(&self, key: &str, expected_offset: u64, payload: &[u8]) -> StoreResult<Appended> {
        (**self).append(key, expected_offset, payload)
    }
    fn get(&self, key: &str, range: Option<Range<u64>>) -> StoreResult<Vec<u8>> {
        (**self).get(key, range)
    }
    fn size(&self, key: &str) -> StoreResult<u64> {
        (**self).size(key)
    }
    fn put(&self, key: &str, bytes: &[u8]) -> StoreResult<()> {
        (**self).put(key, bytes)
    }
    fn delete(&self, key: &str) -> StoreResult<()> {
        (**self).delete(key)
    }
    fn list(&self, prefix: &str) -> StoreResult<Vec<String>> {
        (**self).list(prefix)
    }
    fn counters(&self) -> CostCounters {
        (**self).counters()
    }
    fn supports_append(&self) -> bool {
        (**self).supports_append()
    }
    fn base_latency(&self) -> Duration {
        (**self).base_latency()
    }
    fn pause(&self, d: Duration) {
        (**self).pause(d)
    }
    fn modeled_time(&self) -> bool {
        (**self).modeled_time()
    }
}

/// Validates a byte range against an object of length `len`.
pub(crate) fn check_range(range: &Range<u64>, len: u64) -> StoreResult<()> {
    if range.start > range.end || range.end > len {
        return Err(StoreError::RangeInvalid {
            start: range.start,
            end: range.end,
            len,
        });
    }
    Ok(())
}
