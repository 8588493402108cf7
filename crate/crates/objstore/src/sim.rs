//! In-memory object store with modeled request latency.

use std::collections::HashMap;
use std::ops::Range;
use std::sync::atomic::{AtomicBool, AtomicU32, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Condvar, Mutex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cost::{CostCounters, RequestCounters};
use crate::latency::{LatencyModel, OpKind};
use crate::{
    check_range, Appended, ObjectStore, StoreError, StoreResult, DEFAULT_MAX_PART_BYTES,
    DEFAULT_PART_LIMIT,
};

/// How modeled latency is experienced by callers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimMode {
    /// Requests block for their sampled latency.
    RealTime,
    /// Requests return immediately; the sampled latency is only reported.
    Instant,
}

/// Failure injection for a [`SimStore`]. Injected failures are rejected before
/// the request reaches the object and take no modeled time.
#[derive(Debug, Default)]
pub struct FaultPlan {
    fail_next_appends: AtomicU32,
    down: AtomicBool,
}

impl FaultPlan {
    /// The next `n` appends fail with `Unavailable`.
    pub fn fail_next_appends(&self, n: u32) {
        self.fail_next_appends.store(n, Ordering::SeqCst);
    }

    /// While down, every request fails with `Unavailable`.
    pub fn set_down(&self, down: bool) {
        self.down.store(down, Ordering::SeqCst);
    }

    fn take_append_failure(&self) -> bool {
        if self.down.load(Ordering::SeqCst) {
            return true;
        }
        self.fail_next_appends
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok()
    }

    fn is_down(&self) -> bool {
        self.down.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Default)]
struct SimObject {
    data: Vec<u8>,
    parts: u32,
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct InflightLimit {
    used: Mutex<usize>,
    cv: Condvar,
    cap: usize,
}

impl InflightLimit {
    fn acquire(&self) -> InflightPermit<'_> {
        let mut used = self.used.lock();
        while *used >= self.cap {
            self.cv.wait(&mut used);
        }
        *used += 1;
        InflightPermit(self)
    }
}

struct InflightPermit<'a>(&'a InflightLimit);

impl Drop for InflightPermit<'_> {
    fn drop(&mut self) {
        *self.0.used.lock() -= 1;
        self.0.cv.notify_one();
    }
}

/// Simulated bucket. Objects live in memory; every request draws a latency from
/// the model using a seeded generator, so a fixed seed and request order give a
/// reproducible latency sequence.
pub struct SimStore {
    bucket: String,
    model: LatencyModel,
    mode: SimMode,
    rng: Mutex<ChaCha8Rng>,
    objects: Mutex<HashMap<String, Arc<Mutex<SimObject>>>>,
    counters: RequestCounters,
    faults: FaultPlan,
    inflight: InflightLimit,
    part_limit: u32,
    max_part_bytes: u64,
}

impl SimStore {
    pub fn new(bucket: impl Into<String>, model: LatencyModel, mode: SimMode, seed: u64) -> Self {
        SimStore {
            bucket: bucket.into(),
            model,
            mode,
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            objects: Mutex::new(HashMap::new()),
            counters: RequestCounters::default(),
            faults: FaultPlan::default(),
            inflight: InflightLimit {
                used: Mutex::new(0),
                cv: Condvar::new(),
                cap: 64,
            },
            part_limit: DEFAULT_PART_LIMIT,
            max_part_bytes: DEFAULT_MAX_PART_BYTES,
        }
    }

    /// A zero-latency store for functional tests.
    pub fn instant(bucket: impl Into<String>) -> Self {
        SimStore::new(bucket, LatencyModel::instant(), SimMode::Instant, 0)
    }

    pub fn with_part_limit(mut self, limit: u32) -> Self {
        self.part_limit = limit;
        self
    }

    pub fn with_max_part_bytes(mut self, max: u64) -> Self {
        self.max_part_bytes = max;
        self
    }

    pub fn with_inflight_cap(mut self, cap: usize) -> Self {
        self.inflight.cap = cap.max(1);
        self
    }

    pub fn model(&self) -> &LatencyModel {
        &self.model
    }

    pub fn faults(&self) -> &FaultPlan {
        &self.faults
    }

    /// Number of parts appended to `key` since its creation or last put.
    pub fn part_count(&self, key: &str) -> Option<u32> {
        self.objects.lock().get(key).map(|o| o.lock().parts)
    }

    fn sample(&self, op: OpKind, size: u64) -> Duration {
        let mut rng = self.rng.lock();
        self.model.sample(op, size, &mut *rng)
    }

    fn complete(&self, latency: Duration) {
        if self.mode == SimMode::RealTime && !latency.is_zero() {
            std::thread::sleep(latency);
        }
    }

    fn object(&self, key: &str) -> Option<Arc<Mutex<SimObject>>> {
        self.objects.lock().get(key).cloned()
    }

    fn unavailable(&self) -> StoreResult<()> {
        if self.faults.is_down() {
            return Err(StoreError::Unavailable(format!("{} is down", self.bucket)));
        }
        Ok(())
    }
}

impl ObjectStore for SimStore {
    fn bucket(&self) -> &str {
        &self.bucket
    }

    fn append(&self, key: &str, expected_offset: u64, payload: &[u8]) -> StoreResult<Appended> {
        let _permit = self.inflight.acquire();
        self.counters.record(OpKind::Append);
        if self.faults.take_append_failure() {
            return Err(StoreError::Unavailable(format!(
                "injected append failure on {}/{key}",
                self.bucket
            )));
        }
        let size = payload.len() as u64;
        if size > self.max_part_bytes {
            return Err(StoreError::PayloadTooLarge {
                size,
                max: self.max_part_bytes,
            });
        }
        let op = if expected_offset == 0 {
            OpKind::Put
        } else {
            OpKind::Append
        };
        let latency = self.sample(op, size);
        let obj = {
            let mut objects = self.objects.lock();
            match objects.get(key) {
                Some(o) => o.clone(),
                None if expected_offset == 0 => {
                    let o = Arc::new(Mutex::new(SimObject::default()));
                    objects.insert(key.to_string(), o.clone());
                    o
                }
                None => return Err(StoreError::OffsetMismatch { actual: 0 }),
            }
        };
        let new_length = {
            let mut o = obj.lock();
            let actual = o.data.len() as u64;
            if actual != expected_offset {
                return Err(StoreError::OffsetMismatch { actual });
            }
            if actual > 0 && !self.model.supports_append {
                return Err(StoreError::AppendUnsupported);
            }
            if o.parts >= self.part_limit {
                return Err(StoreError::PartLimitExceeded {
                    limit: self.part_limit,
                });
            }
            o.data.extend_from_slice(payload);
            o.parts += 1;
            o.data.len() as u64
        };
        self.counters.uploaded(size);
        self.counters.stored_delta(size, 0);
        self.complete(latency);
        Ok(Appended {
            new_length,
            service_time: latency,
        })
    }

    fn get(&self, key: &str, range: Option<Range<u64>>) -> StoreResult<Vec<u8>> {
        let _permit = self.inflight.acquire();
        self.counters.record(OpKind::Get);
        self.unavailable()?;
        let obj = self
            .object(key)
            .ok_or_else(|| StoreError::NotFound(key.to_string()))?;
        let bytes = {
            let o = obj.lock();
            let len = o.data.len() as u64;
            let r = range.unwrap_or(0..len);
            check_range(&r, len)?;
            o.data[r.start as usize..r.end as usize].to_vec()
        };
        let latency = self.sample(OpKind::Get, bytes.len() as u64);
        self.counters.downloaded(bytes.len() as u64);
        self.complete(latency);
        Ok(bytes)
    }

    fn size(&self, key: &str) -> StoreResult<u64> {
        let _permit = self.inflight.acquire();
        self.counters.record(OpKind::Get);
        self.unavailable()?;
        let obj = self
            .object(key)
            .ok_or_else(|| StoreError::NotFound(key.to_string()))?;
        let len = obj.lock().data.len() as u64;
        self.complete(self.sample(OpKind::Get, 0));
        Ok(len)
    }

    fn put(&self, key: &str, bytes: &[u8]) -> StoreResult<()> {
        let _permit = self.inflight.acquire();
        self.counters.record(OpKind::Put);
        self.unavailable()?;
        let size = bytes.len() as u64;
        if size > self.max_part_bytes {
            return Err(StoreError::PayloadTooLarge {
                size,
                max: self.max_part_bytes,
            });
        }
        let latency = self.sample(OpKind::Put, size);
        let old = {
            let mut objects = self.objects.lock();
            let obj = objects
                .entry(key.to_string())
                .or_insert_with(|| Arc::new(Mutex::new(SimObject::default())))
                .clone();
            drop(objects);
            let mut o = obj.lock();
            let old = o.data.len() as u64;
            o.data = bytes.to_vec();
            o.parts = 1;
            old
        };
        self.counters.uploaded(size);
        self.counters.stored_delta(size, old);
        self.complete(latency);
        Ok(())
    }

    fn delete(&self, key: &str) -> StoreResult<()> {
        let _permit = self.inflight.acquire();
        self.counters.record(OpKind::Delete);
        self.unavailable()?;
        let latency = self.sample(OpKind::Delete, 0);
        if let Some(obj) = self.objects.lock().remove(key) {
            self.counters.stored_delta(0, obj.lock().data.len() as u64);
        }
        self.complete(latency);
        Ok(())
    }

    fn list(&self, prefix: &str) -> StoreResult<Vec<String>> {
        let _permit = self.inflight.acquire();
        self.counters.record(OpKind::List);
        self.unavailable()?;
        let latency = self.sample(OpKind::List, 0);
        let mut keys: Vec<String> = self
            .objects
            .lock()
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect();
        keys.sort();
        self.complete(latency);
        Ok(keys)
    }

    fn counters(&self) -> CostCounters {
        self.counters.snapshot()
    }

    fn supports_append(&self) -> bool {
        self.model.supports_append
    }

    fn base_latency(&self) -> Duration {
        self.model.append.flat_latency
    }

    fn pause(&self, d: Duration) {
        if self.mode == SimMode::RealTime {
            std::thread::sleep(d);
        }
    }

    fn modeled_time(&self) -> bool {
        self.mode == SimMode::Instant
    }
}
