//! Pipelined group commit.
//!
//! Pre-committed transactions wait here until their own log bytes and their
//! dependencies are durable. Each log tracks the CSNs it holds that are not
//! durable yet; the global commit sequence number (gCSN) is the smallest such
//! CSN over all logs, with idle logs contributing the counter's next value.
//! Every CSN below the gCSN is durable.
//!
//! Release rules:
//! * transaction level: `csn < gCSN`
//! * record level: `dsn < gCSN`, i.e. the newest predecessor and therefore
//!   every predecessor is durable.

use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crossbeam_channel::Sender;
use parking_lot::{Condvar, Mutex};
use thiserror::Error;

use crate::format::{Csn, Dsn};
use crate::mvcc::CsnCounter;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PipelineError {
    #[error("log {log_id} frontier regressed from {current} to {proposed}")]
    FrontierRegression { log_id: u16, current: u64, proposed: u64 },
    #[error("unknown log {0}")]
    UnknownLog(u16),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tracking {
    /// `dsn < gCSN`.
    RecordLevel,
    /// `csn < gCSN`.
    TxnLevel,
    /// `begin_ts < gCSN`.
    TxnLevelBeginTs,
}

impl Tracking {
    pub fn name(self) -> &'static str {
        match self {
            Tracking::RecordLevel => "record",
            Tracking::TxnLevel => "txn",
            Tracking::TxnLevelBeginTs => "txn-begin",
        }
    }
}

impl FromStr for Tracking {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "record" | "record-level" => Ok(Tracking::RecordLevel),
            "txn" | "txn-level" => Ok(Tracking::TxnLevel),
            "txn-begin" => Ok(Tracking::TxnLevelBeginTs),
            other => Err(format!("unknown tracking mode {other:?}")),
        }
    }
}

impl std::fmt::Display for Tracking {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A pre-committed transaction waiting for release.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PendingCommit {
    pub csn: Csn,
    pub dsn: Dsn,
    pub begin_ts: Csn,
    /// `None` for read-only transactions, which have no log bytes.
    pub log_id: Option<u16>,
    /// Logical log offset just past the transaction's entry.
    pub end: u64,
    pub enqueue_time: Instant,
}

impl PendingCommit {
    fn key(&self, mode: Tracking) -> u64 {
        match mode {
            Tracking::RecordLevel => self.dsn.0,
            Tracking::TxnLevel => self.csn.0,
            Tracking::TxnLevelBeginTs => self.begin_ts.0,
        }
    }
}

/// Emitted once per released transaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReleaseEvent {
    pub csn: Csn,
    pub dsn: Dsn,
    pub log_id: Option<u16>,
    pub enqueue_time: Instant,
    pub release_time: Instant,
}

impl ReleaseEvent {
    pub fn latency(&self) -> Duration {
        self.release_time.saturating_duration_since(self.enqueue_time)
    }
}

/// Whether `p` may be released at `gcsn`. Assumes its own bytes are durable.
pub fn eligible(p: &PendingCommit, gcsn: Csn, mode: Tracking) -> bool {
    p.key(mode) < gcsn.0
}

/// Durable frontier and non-durable CSNs of one log.
#[derive(Debug, Clone, Default)]
pub struct LogDurabilityState {
    log_id: u16,
    durable: u64,
    by_end: BTreeSet<(u64, Csn)>,
    csns: BTreeSet<Csn>,
}

impl LogDurabilityState {
    pub fn new(log_id: u16) -> Self {
        LogDurabilityState {
            log_id,
            ..Default::default()
        }
    }

    /// Starts the frontier at `durable` (for a log resumed after recovery).
    pub fn with_durable(mut self, durable: u64) -> Self {
        self.durable = durable;
        self
    }

    pub fn log_id(&self) -> u16 {
        self.log_id
    }

    pub fn durable(&self) -> u64 {
        self.durable
    }

    /// Records a pre-committed CSN whose bytes end at `end`. Returns `false`
    /// if they are already durable.
    pub fn register(&mut self, csn: Csn, end: u64) -> bool {
        if end <= self.durable {
            return false;
        }
        self.by_end.insert((end, csn));
        self.csns.insert(csn);
        true
    }

    /// Advances the frontier. Delivering the current frontier again is a
    /// no-op; a lower one is rejected.
    pub fn advance(&mut self, durable: u64) -> Result<(), PipelineError> {
        if durable < self.durable {
            return Err(PipelineError::FrontierRegression {
                log_id: self.log_id,
                current: self.durable,
                proposed: durable,
            });
        }
        self.durable = durable;
        while let Some(&(end, csn)) = self.by_end.first() {
            if end > durable {
                break;
            }
            self.by_end.pop_first();
            self.csns.remove(&csn);
        }
        Ok(())
    }

    pub fn min_nondurable(&self) -> Option<Csn> {
        self.csns.first().copied()
    }

    pub fn nondurable_len(&self) -> usize {
        self.csns.len()
    }

    pub fn is_nondurable(&self, csn: Csn) -> bool {
        self.csns.contains(&csn)
    }
}

/// Minimum over logs of the smallest non-durable CSN, with logs that have
/// none contributing `next_csn`.
pub fn compute_gcsn<I>(log_minimums: I, next_csn: Csn) -> Csn
where
    I: IntoIterator<Item = Option<Csn>>,
{
    log_minimums
        .into_iter()
        .map(|m| m.unwrap_or(next_csn))
        .min()
        .unwrap_or(next_csn)
        .min(next_csn)
}

/// Released CSNs: everything below the watermark plus a sparse set above it.
#[derive(Debug, Clone)]
pub struct ReleasedSet {
    watermark: u64,
    above: BTreeSet<u64>,
}

impl Default for ReleasedSet {
    fn default() -> Self {
        ReleasedSet::starting_at(Csn(1))
    }
}

impl ReleasedSet {
    /// Treats every CSN below `first` as released.
    pub fn starting_at(first: Csn) -> Self {
        ReleasedSet {
            watermark: first.0.max(1),
            above: BTreeSet::new(),
        }
    }

    /// Returns `false` if `csn` was already released.
    pub fn insert(&mut self, csn: Csn) -> bool {
        if csn.0 < self.watermark || !self.above.insert(csn.0) {
            return false;
        }
        while self.above.first() == Some(&self.watermark) {
            self.above.pop_first();
            self.watermark += 1;
        }
        true
    }

    pub fn contains(&self, csn: Csn) -> bool {
        csn.0 < self.watermark || self.above.contains(&csn.0)
    }

    /// Every CSN below this is released.
    pub fn watermark(&self) -> Csn {
        Csn(self.watermark)
    }

    /// Released CSNs at or above the watermark.
    pub fn sparse_len(&self) -> usize {
        self.above.len()
    }
}

/// Releaser-side queues: pendings waiting for their own bytes, per log and
/// ordered by end offset, and pendings whose bytes are durable, ordered by
/// the mode's release key.
#[derive(Debug, Default)]
struct ReleaseQueue {
    per_log: Vec<BTreeMap<(u64, Csn), PendingCommit>>,
    ready: BTreeMap<(u64, Csn), PendingCommit>,
}

impl ReleaseQueue {
    fn len(&self) -> usize {
        self.ready.len() + self.per_log.iter().map(BTreeMap::len).sum::<usize>()
    }
}

/// Thread-safe commit pipeline shared by workers, flushers and the releaser.
pub struct CommitPipeline {
    mode: Tracking,
    counter: Arc<CsnCounter>,
    logs: Vec<Mutex<LogDurabilityState>>,
    inbox: Mutex<Vec<PendingCommit>>,
    queue: Mutex<ReleaseQueue>,
    released: Mutex<ReleasedSet>,
    released_cv: Condvar,
    wake: Mutex<bool>,
    wake_cv: Condvar,
    last_gcsn: AtomicU64,
    release_count: AtomicU64,
    events: Option<Sender<ReleaseEvent>>,
    release_log: Option<Mutex<Vec<Csn>>>,
}

impl CommitPipeline {
    pub fn new(mode: Tracking, counter: Arc<CsnCounter>, log_count: usize) -> Self {
        let first = counter.next();
        CommitPipeline {
            mode,
            counter,
            logs: (0..log_count)
                .map(|i| Mutex::new(LogDurabilityState::new(i as u16)))
                .collect(),
            inbox: Mutex::new(Vec::new()),
            queue: Mutex::new(ReleaseQueue {
                per_log: vec![BTreeMap::new(); log_count],
                ready: BTreeMap::new(),
            }),
            released: Mutex::new(ReleasedSet::starting_at(first)),
            released_cv: Condvar::new(),
            wake: Mutex::new(false),
            wake_cv: Condvar::new(),
            last_gcsn: AtomicU64::new(0),
            release_count: AtomicU64::new(0),
            events: None,
            release_log: None,
        }
    }

    /// Sends a [`ReleaseEvent`] for every release.
    pub fn with_events(mut self, tx: Sender<ReleaseEvent>) -> Self {
        self.events = Some(tx);
        self
    }

    /// Keeps the CSN of every release in order, see [`CommitPipeline::release_log`].
    pub fn with_release_log(mut self) -> Self {
        self.release_log = Some(Mutex::new(Vec::new()));
        self
    }

    /// Starts each log's frontier at the given logical offsets.
    pub fn with_frontiers(self, frontiers: &[u64]) -> Self {
        for (state, &d) in self.logs.iter().zip(frontiers) {
            let mut s = state.lock();
            *s = LogDurabilityState::new(s.log_id()).with_durable(d);
        }
        self
    }

    pub fn mode(&self) -> Tracking {
        self.mode
    }

    pub fn log_count(&self) -> usize {
        self.logs.len()
    }

    fn log(&self, log_id: u16) -> Result<&Mutex<LogDurabilityState>, PipelineError> {
        self.logs
            .get(log_id as usize)
            .ok_or(PipelineError::UnknownLog(log_id))
    }

    /// Draws a CSN and registers it as non-durable on `log_id` in one step,
    /// so the gCSN can never pass a drawn but unregistered CSN. `on_csn` runs
    /// before the log is unlocked.
    pub fn draw_and_register(
        &self,
        log_id: u16,
        end: u64,
        on_csn: impl FnOnce(Csn),
    ) -> Result<Csn, PipelineError> {
        let mut state = self.log(log_id)?.lock();
        let csn = self.counter.draw();
        on_csn(csn);
        state.register(csn, end);
        Ok(csn)
    }

    /// Registers an already drawn CSN.
    pub fn register(&self, log_id: u16, csn: Csn, end: u64) -> Result<bool, PipelineError> {
        Ok(self.log(log_id)?.lock().register(csn, end))
    }

    /// Hands a pre-committed transaction to the releaser.
    pub fn enqueue(&self, p: PendingCommit) {
        self.inbox.lock().push(p);
        if p.log_id.is_none() {
            self.wake();
        }
    }

    /// Advances a log's durable frontier and wakes the releaser.
    pub fn update_log_durability(&self, log_id: u16, durable: u64) -> Result<(), PipelineError> {
        self.log(log_id)?.lock().advance(durable)?;
        self.wake();
        Ok(())
    }

    pub fn durable_frontier(&self, log_id: u16) -> Result<u64, PipelineError> {
        Ok(self.log(log_id)?.lock().durable())
    }

    pub fn log_state(&self, log_id: u16) -> Result<LogDurabilityState, PipelineError> {
        Ok(self.log(log_id)?.lock().clone())
    }

    fn wake(&self) {
        let mut w = self.wake.lock();
        *w = true;
        self.wake_cv.notify_one();
    }

    /// Blocks until woken by a durability update or `period` elapses.
    pub fn wait_for_work(&self, period: Duration) {
        let mut w = self.wake.lock();
        if !*w {
            self.wake_cv.wait_for(&mut w, period);
        }
        *w = false;
    }

    /// Current gCSN. Reads the counter before any log so that a CSN drawn
    /// concurrently is either below the counter value used or already
    /// registered.
    pub fn compute_gcsn(&self) -> Csn {
        let next = self.counter.next();
        let g = compute_gcsn(self.logs.iter().map(|l| l.lock().min_nondurable()), next);
        self.last_gcsn.fetch_max(g.0, Ordering::SeqCst);
        g
    }

    /// Largest gCSN computed so far.
    pub fn last_gcsn(&self) -> Csn {
        Csn(self.last_gcsn.load(Ordering::SeqCst))
    }

    /// Releases every queued transaction that is eligible now.
    pub fn drain_releasable(&self) -> Vec<ReleaseEvent> {
        let mut q = self.queue.lock();
        let incoming = std::mem::take(&mut *self.inbox.lock());
        let mut frontiers = Vec::with_capacity(self.logs.len());
        for l in &self.logs {
            frontiers.push(l.lock().durable());
        }
        for p in incoming {
            match p.log_id {
                Some(log) if p.end > frontiers[log as usize] => {
                    q.per_log[log as usize].insert((p.end, p.csn), p);
                }
                _ => {
                    q.ready.insert((p.key(self.mode), p.csn), p);
                }
            }
        }
        let ReleaseQueue { per_log, ready } = &mut *q;
        for (log, pending) in per_log.iter_mut().enumerate() {
            while let Some(entry) = pending.first_entry() {
                if entry.key().0 > frontiers[log] {
                    break;
                }
                let p = entry.remove();
                ready.insert((p.key(self.mode), p.csn), p);
            }
        }
        let g = self.compute_gcsn();
        let mut out = Vec::new();
        while let Some(entry) = ready.first_entry() {
            if entry.key().0 >= g.0 {
                break;
            }
            out.push(entry.remove());
        }
        drop(q);
        if out.is_empty() {
            return Vec::new();
        }
        let now = Instant::now();
        {
            let mut r = self.released.lock();
            for p in &out {
                let fresh = r.insert(p.csn);
                debug_assert!(fresh, "csn {} released twice", p.csn);
            }
            if let Some(log) = &self.release_log {
                log.lock().extend(out.iter().map(|p| p.csn));
            }
            self.release_count.fetch_add(out.len() as u64, Ordering::SeqCst);
        }
        self.released_cv.notify_all();
        let events: Vec<ReleaseEvent> = out
            .into_iter()
            .map(|p| ReleaseEvent {
                csn: p.csn,
                dsn: p.dsn,
                log_id: p.log_id,
                enqueue_time: p.enqueue_time,
                release_time: now,
            })
            .collect();
        if let Some(tx) = &self.events {
            for e in &events {
                let _ = tx.send(*e);
            }
        }
        events
    }

    /// Transactions enqueued but not released.
    pub fn pending_count(&self) -> usize {
        self.queue.lock().len() + self.inbox.lock().len()
    }

    pub fn release_count(&self) -> u64 {
        self.release_count.load(Ordering::SeqCst)
    }

    pub fn is_released(&self, csn: Csn) -> bool {
        self.released.lock().contains(csn)
    }

    /// Every CSN below this has been released.
    pub fn released_watermark(&self) -> Csn {
        self.released.lock().watermark()
    }

    /// Blocks until `csn` is released or `timeout` passes.
    pub fn wait_released(&self, csn: Csn, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut r = self.released.lock();
        while !r.contains(csn) {
            if self.released_cv.wait_until(&mut r, deadline).timed_out() {
                return r.contains(csn);
            }
        }
        true
    }

    /// Blocks until every CSN ≤ `csn` is released or `timeout` passes.
    pub fn wait_released_through(&self, csn: Csn, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut r = self.released.lock();
        while r.watermark() <= csn {
            if self.released_cv.wait_until(&mut r, deadline).timed_out() {
                return r.watermark() > csn;
            }
        }
        true
    }

    /// Snapshot of release order, if enabled.
    pub fn release_log(&self) -> Option<Vec<Csn>> {
        self.release_log.as_ref().map(|l| l.lock().clone())
    }

    /// Length of the release log, if enabled.
    pub fn release_log_len(&self) -> Option<usize> {
        self.release_log.as_ref().map(|l| l.lock().len())
    }
}
