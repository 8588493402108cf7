//! Restricted decentralized logging.
//!
//! Workers are split into fixed groups; each group owns one log with two
//! buffers. Members claim space in the active buffer with a CAS on a packed
//! state word, copy their entry in, and mark the bytes complete. A buffer is
//! sealed when a claim would overflow it, when the flush timeout expires, or at
//! shutdown; the sealer waits for outstanding copies and activates the other
//! buffer. The log's flusher appends each sealed buffer as one part of the
//! current segment object.

use std::cell::UnsafeCell;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use dlog_objstore::{ReplicatedStore, StoreError, DEFAULT_MAX_PART_BYTES, DEFAULT_PART_LIMIT};
use parking_lot::{Condvar, Mutex, MutexGuard};
use thiserror::Error;

use crate::format::{Lsn, SegmentFooter, Csn, ENTRY_HEADER_LEN, ENTRY_MAGIC, FOOTER_LEN};

#[derive(Debug, Error)]
pub enum LogError {
    #[error("invalid logging config: {0}")]
    InvalidConfig(String),
    #[error("entry of {size} bytes exceeds the {buffer}-byte log buffer")]
    EntryTooLarge { size: usize, buffer: usize },
    #[error("log {log_id} halted: {reason}")]
    Halted { log_id: u16, reason: String },
    #[error("log {log_id} storage unavailable: {source}")]
    StorageUnavailable { log_id: u16, source: StoreError },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoggingConfig {
    pub worker_count: usize,
    /// Threads sharing one log buffer.
    pub group_size: usize,
    /// Capacity of each of a log's two buffers.
    pub buffer_bytes: usize,
    /// Seal a partially filled buffer this long after its first reservation.
    /// `None` disables timeout flushes.
    pub flush_timeout: Option<Duration>,
    pub per_thread_base_bytes: usize,
    /// Require `buffer_bytes >= group_size * per_thread_base_bytes`.
    pub proportional: bool,
    pub segment_append_limit: u32,
    pub max_part_bytes: u64,
}

impl Default for LoggingConfig {
    fn default() -> Self {
        LoggingConfig {
            worker_count: 8,
            group_size: 2,
            buffer_bytes: 1 << 20,
            flush_timeout: Some(Duration::from_millis(3)),
            per_thread_base_bytes: 512 << 10,
            proportional: true,
            segment_append_limit: DEFAULT_PART_LIMIT,
            max_part_bytes: DEFAULT_MAX_PART_BYTES,
        }
    }
}

impl LoggingConfig {
    /// Per-thread logging: one log per worker with the base buffer size.
    pub fn per_thread(worker_count: usize) -> Self {
        LoggingConfig {
            worker_count,
            group_size: 1,
            buffer_bytes: 512 << 10,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), LogError> {
        let bad = |m: String| Err(LogError::InvalidConfig(m));
        if self.group_size == 0 {
            return bad("group_size must be at least 1".into());
        }
        if self.worker_count == 0 {
            return bad("worker_count must be at least 1".into());
        }
        if self.log_count() > u16::MAX as usize {
            return bad(format!("{} logs exceed the log id range", self.log_count()));
        }
        if self.buffer_bytes < ENTRY_HEADER_LEN {
            return bad(format!("buffer_bytes {} is too small", self.buffer_bytes));
        }
        if self.buffer_bytes >= (u32::MAX >> 1) as usize {
            return bad(format!("buffer_bytes {} is too large", self.buffer_bytes));
        }
        if (self.buffer_bytes + FOOTER_LEN) as u64 > self.max_part_bytes {
            return bad(format!(
                "buffer_bytes {} exceeds the part size limit {}",
                self.buffer_bytes, self.max_part_bytes
            ));
        }
        if self.proportional && self.buffer_bytes < self.group_size * self.per_thread_base_bytes {
            return bad(format!(
                "buffer_bytes {} is below group_size {} x per-thread base {}",
                self.buffer_bytes, self.group_size, self.per_thread_base_bytes
            ));
        }
        if self.segment_append_limit == 0 {
            return bad("segment_append_limit must be at least 1".into());
        }
        if self.flush_timeout.is_some_and(|t| t.is_zero()) {
            return bad("flush_timeout must be positive".into());
        }
        Ok(())
    }

    pub fn log_count(&self) -> usize {
        if self.group_size == 0 {
            return 0;
        }
        self.worker_count.div_ceil(self.group_size)
    }
}

/// Maps each worker to its log: workers `[k*g, (k+1)*g)` share log `k`.
pub fn assign_groups(config: &LoggingConfig) -> Result<Vec<u16>, LogError> {
    config.validate()?;
    Ok((0..config.worker_count)
        .map(|w| (w / config.group_size) as u16)
        .collect())
}

/// Object key of a segment; keys number segments from 1.
pub fn segment_key(log_id: u16, segment_index: u32) -> String {
    format!("log-{log_id}-seg-{}", segment_index as u64 + 1)
}

/// Inverse of [`segment_key`]: `(log_id, segment_index)`.
pub fn parse_segment_key(key: &str) -> Option<(u16, u32)> {
    let rest = key.strip_prefix("log-")?;
    let (log, seg) = rest.split_once("-seg-")?;
    let n: u64 = seg.parse().ok()?;
    if n == 0 || n > u32::MAX as u64 + 1 || seg.starts_with('0') || log.starts_with('+') {
        return None;
    }
    Some((log.parse().ok()?, (n - 1) as u32))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SealReason {
    Full,
    Timeout,
    Shutdown,
}

const CLAIM_MASK: u64 = 0xFFFF_FFFF;
const SEALED: u64 = 1 << 32;
const GEN_SHIFT: u32 = 33;
const GEN_MASK: u64 = (1 << 31) - 1;

fn pack(generation: u64, claimed: u64) -> u64 {
    ((generation & GEN_MASK) << GEN_SHIFT) | claimed
}

fn gen_of(state: u64) -> u64 {
    state >> GEN_SHIFT
}

struct Buffer {
    data: Box<[UnsafeCell<u8>]>,
    // generation | sealed | claimed bytes
    state: AtomicU64,
    completed: AtomicU64,
    // logical log offset of byte 0
    base: AtomicU64,
    // nanos since the group's epoch, 0 = nothing claimed yet
    first_claim: AtomicU64,
}

impl Buffer {
    fn new(cap: usize, generation: u64) -> Self {
        Buffer {
            data: (0..cap).map(|_| UnsafeCell::new(0)).collect(),
            state: AtomicU64::new(pack(generation, 0)),
            completed: AtomicU64::new(0),
            base: AtomicU64::new(0),
            first_claim: AtomicU64::new(0),
        }
    }

    fn ptr(&self) -> *mut u8 {
        UnsafeCell::raw_get(self.data.as_ptr())
    }
}

/// A sealed buffer awaiting its flush.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SealedBuffer {
    pub generation: u64,
    /// Logical log offset of the first byte.
    pub base: u64,
    pub len: usize,
    pub reason: SealReason,
}

impl SealedBuffer {
    /// Logical log offset just past the buffer.
    pub fn end(&self) -> u64 {
        self.base + self.len as u64
    }
}

#[derive(Default)]
struct Ctl {
    in_flight: Option<SealedBuffer>,
    taken: bool,
    shutdown: bool,
    halted: Option<String>,
}

/// Counters of one log's sealing activity.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SealCounts {
    pub full: u64,
    pub timeout: u64,
    pub shutdown: u64,
}

/// One log's double buffer. Shared by the group's workers and its flusher.
pub struct LogGroup {
    log_id: u16,
    cap: usize,
    timeout: Option<Duration>,
    bufs: [Buffer; 2],
    active: AtomicU64,
    ctl: Mutex<Ctl>,
    cv: Condvar,
    epoch: Instant,
    seals: Mutex<SealCounts>,
}

// SAFETY: buffer bytes are only written through `ReservedSlot`s, whose ranges
// are disjoint by construction of the CAS claim, and only read through a
// sealed buffer after every claimed byte has been completed. A buffer is not
// reactivated (and so not written again) until its flush has been released.
unsafe impl Sync for LogGroup {}

/// A claimed byte range in a log buffer. Completes on drop.
pub struct ReservedSlot<'a> {
    group: &'a LogGroup,
    buf: usize,
    pub generation: u64,
    pub offset: usize,
    len: usize,
    /// Logical log offset just past this slot.
    pub end: u64,
}

impl ReservedSlot<'_> {
    pub fn bytes_mut(&mut self) -> &mut [u8] {
        // SAFETY: see `unsafe impl Sync for LogGroup`; this range belongs to
        // this slot alone until it is completed.
        unsafe {
            std::slice::from_raw_parts_mut(self.group.bufs[self.buf].ptr().add(self.offset), self.len)
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Marks the copied bytes complete.
    pub fn complete(self) {}
}

impl Drop for ReservedSlot<'_> {
    fn drop(&mut self) {
        self.group.bufs[self.buf]
            .completed
            .fetch_add(self.len as u64, Ordering::Release);
    }
}

impl LogGroup {
    pub fn new(log_id: u16, buffer_bytes: usize, flush_timeout: Option<Duration>) -> Self {
        LogGroup {
            log_id,
            cap: buffer_bytes,
            timeout: flush_timeout,
            bufs: [Buffer::new(buffer_bytes, 0), Buffer::new(buffer_bytes, GEN_MASK)],
            active: AtomicU64::new(0),
            ctl: Mutex::new(Ctl::default()),
            cv: Condvar::new(),
            epoch: Instant::now(),
            seals: Mutex::new(SealCounts::default()),
        }
    }

    /// Starts the log at a logical offset other than zero.
    pub fn with_base(self, base: u64) -> Self {
        self.bufs[0].base.store(base, Ordering::SeqCst);
        self
    }

    pub fn log_id(&self) -> u16 {
        self.log_id
    }

    pub fn buffer_bytes(&self) -> usize {
        self.cap
    }

    pub fn seal_counts(&self) -> SealCounts {
        *self.seals.lock()
    }

    fn now_nanos(&self) -> u64 {
        self.epoch.elapsed().as_nanos() as u64 + 1
    }

    fn halted(&self, ctl: &Ctl) -> Result<(), LogError> {
        match &ctl.halted {
            Some(reason) => Err(LogError::Halted {
                log_id: self.log_id,
                reason: reason.clone(),
            }),
            None => Ok(()),
        }
    }

    /// Claims `n` contiguous bytes in the active buffer, sealing it first if
    /// the claim does not fit.
    pub fn reserve(&self, n: usize) -> Result<ReservedSlot<'_>, LogError> {
        if n > self.cap {
            return Err(LogError::EntryTooLarge {
                size: n,
                buffer: self.cap,
            });
        }
        let mut spins = 0u32;
        loop {
            let g = self.active.load(Ordering::Acquire);
            let idx = (g & 1) as usize;
            let b = &self.bufs[idx];
            let s = b.state.load(Ordering::Acquire);
            if gen_of(s) != g & GEN_MASK {
                // activation of this generation still in progress
                spins += 1;
                if spins > 64 {
                    std::thread::yield_now();
                }
                continue;
            }
            if s & SEALED != 0 {
                self.wait_for_swap(g)?;
                continue;
            }
            let claimed = (s & CLAIM_MASK) as usize;
            if claimed + n > self.cap {
                let mut ctl = self.ctl.lock();
                self.seal_locked(&mut ctl, g, SealReason::Full)?;
                continue;
            }
            if b
                .state
                .compare_exchange_weak(s, s + n as u64, Ordering::AcqRel, Ordering::Acquire)
                .is_ok()
            {
                let base = b.base.load(Ordering::Acquire);
                if claimed == 0 && self.timeout.is_some() {
                    b.first_claim.store(self.now_nanos(), Ordering::Release);
                    // No ctl lock here: a sealer may hold it while waiting
                    // for this slot. The flusher's idle wait is bounded.
                    self.cv.notify_all();
                }
                return Ok(ReservedSlot {
                    group: self,
                    buf: idx,
                    generation: g,
                    offset: claimed,
                    len: n,
                    end: base + (claimed + n) as u64,
                });
            }
        }
    }

    fn wait_for_swap(&self, g: u64) -> Result<(), LogError> {
        let mut ctl = self.ctl.lock();
        while self.active.load(Ordering::Acquire) == g {
            self.halted(&ctl)?;
            self.cv.wait(&mut ctl);
        }
        Ok(())
    }

    /// Seals generation `g` if it is still active and non-empty. Waits for
    /// the other buffer's flush to finish and for in-progress copies.
    fn seal_locked(
        &self,
        ctl: &mut MutexGuard<'_, Ctl>,
        g: u64,
        reason: SealReason,
    ) -> Result<Option<SealedBuffer>, LogError> {
        loop {
            self.halted(ctl)?;
            if self.active.load(Ordering::Acquire) != g {
                return Ok(None);
            }
            if ctl.in_flight.is_none() {
                break;
            }
            self.cv.wait(ctl);
        }
        let b = &self.bufs[(g & 1) as usize];
        let s = b.state.fetch_or(SEALED, Ordering::AcqRel);
        let claimed = s & CLAIM_MASK;
        if claimed == 0 {
            b.state.fetch_and(!SEALED, Ordering::AcqRel);
            return Ok(None);
        }
        let mut spins = 0u32;
        while b.completed.load(Ordering::Acquire) != claimed {
            spins += 1;
            if spins < 64 {
                std::hint::spin_loop();
            } else {
                std::thread::yield_now();
            }
        }
        let base = b.base.load(Ordering::Acquire);
        let next = &self.bufs[((g + 1) & 1) as usize];
        next.base.store(base + claimed, Ordering::Release);
        next.completed.store(0, Ordering::Release);
        next.first_claim.store(0, Ordering::Release);
        next.state.store(pack(g + 1, 0), Ordering::Release);
        self.active.store(g + 1, Ordering::Release);
        let sealed = SealedBuffer {
            generation: g,
            base,
            len: claimed as usize,
            reason,
        };
        ctl.in_flight = Some(sealed);
        ctl.taken = false;
        {
            let mut c = self.seals.lock();
            match reason {
                SealReason::Full => c.full += 1,
                SealReason::Timeout => c.timeout += 1,
                SealReason::Shutdown => c.shutdown += 1,
            }
        }
        self.cv.notify_all();
        Ok(Some(sealed))
    }

    /// Seals the active buffer. Returns `None` when it is empty.
    pub fn seal_and_swap(&self, reason: SealReason) -> Result<Option<SealedBuffer>, LogError> {
        let mut ctl = self.ctl.lock();
        let g = self.active.load(Ordering::Acquire);
        self.seal_locked(&mut ctl, g, reason)
    }

    /// Bytes of a sealed buffer that has not been released yet.
    pub fn sealed_bytes(&self, sealed: &SealedBuffer) -> &[u8] {
        // SAFETY: all claimed bytes are complete and the buffer cannot be
        // reactivated before `release_sealed`.
        unsafe {
            std::slice::from_raw_parts(self.bufs[(sealed.generation & 1) as usize].ptr(), sealed.len)
        }
    }

    /// Frees the in-flight buffer after its flush.
    pub fn release_sealed(&self, sealed: &SealedBuffer) {
        let mut ctl = self.ctl.lock();
        if ctl.in_flight.is_some_and(|s| s.generation == sealed.generation) {
            ctl.in_flight = None;
            ctl.taken = false;
        }
        self.cv.notify_all();
    }

    /// Blocks until a sealed buffer is ready to flush, sealing the active
    /// buffer on timeout. Returns `None` once shut down and drained.
    pub fn next_sealed(&self) -> Result<Option<SealedBuffer>, LogError> {
        let mut ctl = self.ctl.lock();
        loop {
            self.halted(&ctl)?;
            if let Some(s) = ctl.in_flight {
                if !ctl.taken {
                    ctl.taken = true;
                    return Ok(Some(s));
                }
                self.cv.wait(&mut ctl);
                continue;
            }
            let g = self.active.load(Ordering::Acquire);
            if ctl.shutdown {
                if self.seal_locked(&mut ctl, g, SealReason::Shutdown)?.is_none() {
                    return Ok(None);
                }
                continue;
            }
            let first = self.bufs[(g & 1) as usize].first_claim.load(Ordering::Acquire);
            match self.timeout {
                Some(t) if first != 0 => {
                    let due = first + t.as_nanos() as u64;
                    let now = self.now_nanos();
                    if now >= due {
                        self.seal_locked(&mut ctl, g, SealReason::Timeout)?;
                    } else {
                        self.cv.wait_for(&mut ctl, Duration::from_nanos(due - now));
                    }
                }
                Some(t) => {
                    self.cv.wait_for(&mut ctl, t);
                }
                None => {
                    self.cv.wait(&mut ctl);
                }
            }
        }
    }

    /// Asks the flusher to flush what is buffered and stop.
    pub fn shutdown(&self) {
        self.ctl.lock().shutdown = true;
        self.cv.notify_all();
    }

    /// Stops the log after an unrecoverable storage failure; blocked and
    /// future reservations fail.
    pub fn halt(&self, reason: String) {
        let mut ctl = self.ctl.lock();
        ctl.halted.get_or_insert(reason);
        self.cv.notify_all();
    }

    pub fn is_halted(&self) -> bool {
        self.ctl.lock().halted.is_some()
    }
}

/// CSN range and entry count of a run of transaction entries.
pub fn entry_csn_range(bytes: &[u8]) -> Option<(Csn, Csn, u64)> {
    let mut off = 0usize;
    let mut lo = u64::MAX;
    let mut hi = 0u64;
    let mut n = 0u64;
    while off + ENTRY_HEADER_LEN <= bytes.len() && bytes[off..off + 4] == ENTRY_MAGIC {
        let csn = u64::from_le_bytes(bytes[off + 8..off + 16].try_into().expect("8 bytes"));
        let body = u32::from_le_bytes(bytes[off + 28..off + 32].try_into().expect("4 bytes"));
        lo = lo.min(csn);
        hi = hi.max(csn);
        n += 1;
        off += ENTRY_HEADER_LEN + body as usize;
    }
    (n > 0).then_some((Csn(lo), Csn(hi), n))
}

/// Result of one flush.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlushRecord {
    pub log_id: u16,
    pub key: String,
    /// Offset of the part within the segment.
    pub offset: u64,
    /// Bytes appended, footer included.
    pub bytes: u64,
    /// Physical durable frontier after the flush.
    pub durable_lsn: Lsn,
    /// Logical durable frontier after the flush.
    pub durable_end: u64,
    pub ack_time: Duration,
    pub replica_times: Vec<Option<Duration>>,
    /// Set when this part sealed its segment.
    pub sealed_segment: bool,
    pub reason: SealReason,
}

/// Appends sealed buffers to a log's segment objects, rolling over at the
/// append limit. The final part of each segment carries the footer.
pub struct SegmentWriter {
    log_id: u16,
    store: Arc<ReplicatedStore>,
    limit: u32,
    segment_index: u32,
    segment_len: u64,
    append_count: u32,
    min_csn: u64,
    max_csn: u64,
    entries: u64,
}

impl SegmentWriter {
    /// Writes segments of `log_id` starting at a fresh segment `segment_index`.
    /// Backends without append support get one part per segment.
    pub fn new(log_id: u16, store: Arc<ReplicatedStore>, append_limit: u32, segment_index: u32) -> Self {
        let limit = if dlog_objstore::ObjectStore::supports_append(&*store) {
            append_limit.max(1)
        } else {
            1
        };
        SegmentWriter {
            log_id,
            store,
            limit,
            segment_index,
            segment_len: 0,
            append_count: 0,
            min_csn: u64::MAX,
            max_csn: 0,
            entries: 0,
        }
    }

    pub fn append_limit(&self) -> u32 {
        self.limit
    }

    pub fn position(&self) -> Lsn {
        Lsn {
            log_id: self.log_id,
            segment_index: self.segment_index,
            byte_offset: self.segment_len,
        }
    }

    /// Appends one sealed buffer as one part.
    pub fn write(&mut self, data: &[u8]) -> Result<FlushRecord, StoreError> {
        let (lo, hi, n) = entry_csn_range(data).map(|(a, b, n)| (a.0, b.0, n)).unwrap_or((u64::MAX, 0, 0));
        let min_csn = self.min_csn.min(lo);
        let max_csn = self.max_csn.max(hi);
        let entries = self.entries + n;
        let last = self.append_count + 1 >= self.limit;
        let key = segment_key(self.log_id, self.segment_index);
        let footer;
        let payload: &[u8] = if last {
            let f = SegmentFooter {
                min_csn: Csn(if min_csn == u64::MAX { 0 } else { min_csn }),
                max_csn: Csn(max_csn),
                entry_count: entries,
            };
            let mut v = Vec::with_capacity(data.len() + FOOTER_LEN);
            v.extend_from_slice(data);
            v.extend_from_slice(&f.encode());
            footer = v;
            &footer
        } else {
            data
        };
        let offset = self.segment_len;
        let ack = self.store.replicated_append(&key, offset, payload)?;
        self.segment_len = ack.new_length;
        self.append_count += 1;
        self.min_csn = min_csn;
        self.max_csn = max_csn;
        self.entries = entries;
        let durable_lsn = self.position();
        if last {
            self.segment_index += 1;
            self.segment_len = 0;
            self.append_count = 0;
            self.min_csn = u64::MAX;
            self.max_csn = 0;
            self.entries = 0;
        }
        Ok(FlushRecord {
            log_id: self.log_id,
            key,
            offset,
            bytes: payload.len() as u64,
            durable_lsn,
            durable_end: 0,
            ack_time: ack.ack_time,
            replica_times: ack.replica_times,
            sealed_segment: last,
            reason: SealReason::Full,
        })
    }
}

/// Flusher loop for one log: flushes every sealed buffer in order and reports
/// each durable frontier to `on_durable`. Returns after shutdown, or with an
/// error after the log halts.
pub fn run_flusher(
    group: &LogGroup,
    writer: &mut SegmentWriter,
    mut on_durable: impl FnMut(&FlushRecord),
) -> Result<(), LogError> {
    while let Some(sealed) = group.next_sealed()? {
        let data = group.sealed_bytes(&sealed);
        match writer.write(data) {
            Ok(mut rec) => {
                rec.durable_end = sealed.end();
                rec.reason = sealed.reason;
                group.release_sealed(&sealed);
                on_durable(&rec);
            }
            Err(e) => {
                log::error!("log {} flush failed: {e}", group.log_id());
                group.halt(e.to_string());
                return Err(LogError::StorageUnavailable {
                    log_id: group.log_id(),
                    source: e,
                });
            }
        }
    }
    Ok(())
}
