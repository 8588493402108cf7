use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use parking_lot::Mutex;

use crate::latency::OpKind;

const BYTES_PER_GB: f64 = 1e9;
const SECONDS_PER_MONTH: f64 = 30.0 * 24.0 * 3600.0;

/// Snapshot of request and byte counters.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CostCounters {
    pub gets: u64,
    pub appends: u64,
    pub puts: u64,
    pub deletes: u64,
    pub lists: u64,
    pub bytes_uploaded: u64,
    pub bytes_downloaded: u64,
    pub storage_byte_seconds: f64,
}

impl CostCounters {
    pub fn request_count(&self) -> u64 {
        self.gets + self.appends + self.puts + self.deletes + self.lists
    }

    pub fn requests(&self, op: OpKind) -> u64 {
        match op {
            OpKind::Get => self.gets,
            OpKind::Append => self.appends,
            OpKind::Put => self.puts,
            OpKind::Delete => self.deletes,
            OpKind::List => self.lists,
        }
    }

    /// Element-wise sum, used to aggregate replicas.
    pub fn merged(&self, other: &CostCounters) -> CostCounters {
        CostCounters {
            gets: self.gets + other.gets,
            appends: self.appends + other.appends,
            puts: self.puts + other.puts,
            deletes: self.deletes + other.deletes,
            lists: self.lists + other.lists,
            bytes_uploaded: self.bytes_uploaded + other.bytes_uploaded,
            bytes_downloaded: self.bytes_downloaded + other.bytes_downloaded,
            storage_byte_seconds: self.storage_byte_seconds + other.storage_byte_seconds,
        }
    }

    /// Counter increase since `earlier`.
    pub fn since(&self, earlier: &CostCounters) -> CostCounters {
        CostCounters {
            gets: self.gets - earlier.gets,
            appends: self.appends - earlier.appends,
            puts: self.puts - earlier.puts,
            deletes: self.deletes - earlier.deletes,
            lists: self.lists - earlier.lists,
            bytes_uploaded: self.bytes_uploaded - earlier.bytes_uploaded,
            bytes_downloaded: self.bytes_downloaded - earlier.bytes_downloaded,
            storage_byte_seconds: self.storage_byte_seconds - earlier.storage_byte_seconds,
        }
    }
}

/// Live counters shared by a backend's request paths.
#[derive(Debug)]
pub struct RequestCounters {
    gets: AtomicU64,
    appends: AtomicU64,
    puts: AtomicU64,
    deletes: AtomicU64,
    lists: AtomicU64,
    bytes_uploaded: AtomicU64,
    bytes_downloaded: AtomicU64,
    storage: Mutex<StorageIntegral>,
}

#[derive(Debug)]
struct StorageIntegral {
    last: Instant,
    stored_bytes: u64,
    byte_seconds: f64,
}

impl StorageIntegral {
    fn advance(&mut self, now: Instant) {
        let dt = now.saturating_duration_since(self.last).as_secs_f64();
        self.byte_seconds += dt * self.stored_bytes as f64;
        self.last = now;
    }
}

impl Default for RequestCounters {
    fn default() -> Self {
        RequestCounters {
            gets: AtomicU64::new(0),
            appends: AtomicU64::new(0),
            puts: AtomicU64::new(0),
            deletes: AtomicU64::new(0),
            lists: AtomicU64::new(0),
            bytes_uploaded: AtomicU64::new(0),
            bytes_downloaded: AtomicU64::new(0),
            storage: Mutex::new(StorageIntegral {
                last: Instant::now(),
                stored_bytes: 0,
                byte_seconds: 0.0,
            }),
        }
    }
}

impl RequestCounters {
    /// Counts one request of kind `op`.
    pub fn record(&self, op: OpKind) {
        let c = match op {
            OpKind::Get => &self.gets,
            OpKind::Append => &self.appends,
            OpKind::Put => &self.puts,
            OpKind::Delete => &self.deletes,
            OpKind::List => &self.lists,
        };
        c.fetch_add(1, Ordering::Relaxed);
    }

    pub fn uploaded(&self, bytes: u64) {
        self.bytes_uploaded.fetch_add(bytes, Ordering::Relaxed);
    }

    pub fn downloaded(&self, bytes: u64) {
        self.bytes_downloaded.fetch_add(bytes, Ordering::Relaxed);
    }

    /// Adjusts the stored byte total after a write or delete.
    pub fn stored_delta(&self, added: u64, removed: u64) {
        let mut s = self.storage.lock();
        s.advance(Instant::now());
        s.stored_bytes = (s.stored_bytes + added).saturating_sub(removed);
    }

    pub fn snapshot(&self) -> CostCounters {
        let byte_seconds = {
            let mut s = self.storage.lock();
            s.advance(Instant::now());
            s.byte_seconds
        };
        CostCounters {
            gets: self.gets.load(Ordering::Relaxed),
            appends: self.appends.load(Ordering::Relaxed),
            puts: self.puts.load(Ordering::Relaxed),
            deletes: self.deletes.load(Ordering::Relaxed),
            lists: self.lists.load(Ordering::Relaxed),
            bytes_uploaded: self.bytes_uploaded.load(Ordering::Relaxed),
            bytes_downloaded: self.bytes_downloaded.load(Ordering::Relaxed),
            storage_byte_seconds: byte_seconds,
        }
    }
}

/// Request and transfer prices. Defaults are S3 Express One Zone list prices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pricing {
    pub per_request_dollars_per_million: f64,
    pub per_gb_upload_dollars: f64,
    /// Storage price per GB-month; `None` leaves storage out of the estimate.
    pub per_gb_month_storage_dollars: Option<f64>,
}

impl Default for Pricing {
    fn default() -> Self {
        Pricing {
            per_request_dollars_per_million: 1.13,
            per_gb_upload_dollars: 0.0032,
            per_gb_month_storage_dollars: None,
        }
    }
}

/// Dollar cost of the requests and uploads recorded in `counters`.
/// Gigabytes are decimal (10^9 bytes).
pub fn estimate_cost(counters: &CostCounters, pricing: &Pricing) -> f64 {
    let requests =
        counters.request_count() as f64 * pricing.per_request_dollars_per_million / 1e6;
    let upload = counters.bytes_uploaded as f64 / BYTES_PER_GB * pricing.per_gb_upload_dollars;
    let storage = pricing
        .per_gb_month_storage_dollars
        .map(|rate| counters.storage_byte_seconds / BYTES_PER_GB / SECONDS_PER_MONTH * rate)
        .unwrap_or(0.0);
    requests + upload + storage
}
