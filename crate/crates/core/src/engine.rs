//! Running engine: MVCC database, grouped log buffers with one flusher thread
//! per log, and a releaser thread driving the commit pipeline.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, Sender};
use dlog_objstore::{CostCounters, ObjectStore, ReplicatedStore, StoreError};
use parking_lot::Mutex;
use thiserror::Error;

use crate::format::{encode_txn_entry_into, encoded_entry_len, Csn, Dsn, FormatError, Lsn};
use crate::logging::{assign_groups, run_flusher, FlushRecord, LogError, LogGroup, LoggingConfig, SealCounts, SegmentWriter};
use crate::mvcc::{Catalog, Database, MvccError, Transaction};
use crate::pipeline::{CommitPipeline, PendingCommit, PipelineError, ReleaseEvent, Tracking};
use crate::recovery::{Recovered, RecoveryError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Mvcc(#[from] MvccError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Recovery(#[from] RecoveryError),
    #[error("worker {0} out of range")]
    UnknownWorker(usize),
    #[error("engine thread panicked")]
    ThreadPanicked,
}

pub type EngineResult<T> = Result<T, EngineError>;

/// Called on the flusher thread after every successful flush, once the
/// pipeline has seen the new frontier.
pub type FlushHook = Arc<dyn Fn(&FlushRecord) + Send + Sync>;

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub logging: LoggingConfig,
    pub tracking: Tracking,
    /// Backstop period of the releaser.
    pub release_period: Duration,
    /// Keep every release in order, see [`CommitPipeline::release_log`].
    pub record_release_log: bool,
    /// Send a [`ReleaseEvent`] per release to [`Engine::release_events`].
    pub emit_events: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            logging: LoggingConfig::default(),
            tracking: Tracking::RecordLevel,
            release_period: Duration::from_millis(1),
            record_release_log: false,
            emit_events: false,
        }
    }
}

/// Result of a successful pre-commit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Precommitted {
    pub csn: Csn,
    pub dsn: Dsn,
    pub log_id: Option<u16>,
    /// Encoded entry size, 0 for read-only transactions.
    pub bytes: usize,
    /// Logical log offset just past the entry, 0 for read-only transactions.
    pub end: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EngineStats {
    pub released: u64,
    pub flushes: u64,
    pub seals: Vec<SealCounts>,
    pub store: CostCounters,
}

pub struct EngineBuilder {
    config: EngineConfig,
    store: Arc<ReplicatedStore>,
    hook: Option<FlushHook>,
    recovered: Option<Recovered>,
}

impl EngineBuilder {
    pub fn flush_hook(mut self, hook: FlushHook) -> Self {
        self.hook = Some(hook);
        self
    }

    /// Starts from recovered state instead of an empty database. Unsealed
    /// tail segments are sealed before new segments are written.
    pub fn recovered(mut self, recovered: Recovered) -> Self {
        self.recovered = Some(recovered);
        self
    }

    pub fn start(self, catalog: Catalog) -> EngineResult<Engine> {
        let EngineBuilder { config, store, hook, recovered } = self;
        let assignment = assign_groups(&config.logging)?;
        let logs = config.logging.log_count();
        let workers = config.logging.worker_count;
        let (db, first_segments) = match recovered {
            Some(r) => {
                r.seal_tails(&*store)?;
                let segs: Vec<u32> = (0..logs).map(|l| r.next_segment(l as u16)).collect();
                (r.into_database(workers)?, segs)
            }
            None => (Database::new(catalog, workers), vec![0; logs]),
        };
        let db = Arc::new(db);

        let mut pipeline = CommitPipeline::new(config.tracking, db.counter().clone(), logs);
        let mut events_rx = None;
        if config.emit_events {
            let (tx, rx): (Sender<ReleaseEvent>, Receiver<ReleaseEvent>) = crossbeam_channel::unbounded();
            pipeline = pipeline.with_events(tx);
            events_rx = Some(rx);
        }
        if config.record_release_log {
            pipeline = pipeline.with_release_log();
        }
        let pipeline = Arc::new(pipeline);

        let groups: Vec<Arc<LogGroup>> = (0..logs)
            .map(|l| {
                Arc::new(LogGroup::new(
                    l as u16,
                    config.logging.buffer_bytes,
                    config.logging.flush_timeout,
                ))
            })
            .collect();
        let durable: Arc<Vec<Mutex<Lsn>>> = Arc::new(
            first_segments
                .iter()
                .enumerate()
                .map(|(l, &s)| {
                    Mutex::new(Lsn {
                        log_id: l as u16,
                        segment_index: s,
                        byte_offset: 0,
                    })
                })
                .collect(),
        );
        let flush_count = Arc::new(std::sync::atomic::AtomicU64::new(0));

        let mut flushers = Vec::with_capacity(logs);
        for (l, group) in groups.iter().enumerate() {
            let group = group.clone();
            let mut writer = SegmentWriter::new(
                l as u16,
                store.clone(),
                config.logging.segment_append_limit,
                first_segments[l],
            );
            let pipeline = pipeline.clone();
            let durable = durable.clone();
            let hook = hook.clone();
            let flush_count = flush_count.clone();
            let h = std::thread::Builder::new()
                .name(format!("flusher-{l}"))
                .spawn(move || {
                    run_flusher(&group, &mut writer, |rec| {
                        *durable[l].lock() = writer_position(rec);
                        flush_count.fetch_add(1, Ordering::Relaxed);
                        if let Err(e) = pipeline.update_log_durability(l as u16, rec.durable_end) {
                            log::error!("log {l}: {e}");
                        }
                        if let Some(h) = &hook {
                            h(rec);
                        }
                    })
                })
                .expect("spawn flusher");
            flushers.push(h);
        }

        let stop = Arc::new(AtomicBool::new(false));
        let releaser = {
            let pipeline = pipeline.clone();
            let stop = stop.clone();
            let period = config.release_period;
            std::thread::Builder::new()
                .name("releaser".into())
                .spawn(move || loop {
                    let done = stop.load(Ordering::SeqCst);
                    pipeline.wait_for_work(period);
                    pipeline.drain_releasable();
                    if done {
                        break;
                    }
                })
                .expect("spawn releaser")
        };

        Ok(Engine {
            config,
            db,
            store,
            groups,
            assignment,
            pipeline,
            durable,
            flush_count,
            events_rx: Mutex::new(events_rx),
            flushers: Mutex::new(flushers),
            releaser: Mutex::new(Some(releaser)),
            stop,
        })
    }
}

fn writer_position(rec: &FlushRecord) -> Lsn {
    if rec.sealed_segment {
        Lsn {
            log_id: rec.log_id,
            segment_index: rec.durable_lsn.segment_index + 1,
            byte_offset: 0,
        }
    } else {
        rec.durable_lsn
    }
}

pub struct Engine {
    config: EngineConfig,
    db: Arc<Database>,
    store: Arc<ReplicatedStore>,
    groups: Vec<Arc<LogGroup>>,
    assignment: Vec<u16>,
    pipeline: Arc<CommitPipeline>,
    durable: Arc<Vec<Mutex<Lsn>>>,
    flush_count: Arc<std::sync::atomic::AtomicU64>,
    events_rx: Mutex<Option<Receiver<ReleaseEvent>>>,
    flushers: Mutex<Vec<JoinHandle<Result<(), LogError>>>>,
    releaser: Mutex<Option<JoinHandle<()>>>,
    stop: Arc<AtomicBool>,
}

impl Engine {
    pub fn builder(config: EngineConfig, store: Arc<ReplicatedStore>) -> EngineBuilder {
        EngineBuilder {
            config,
            store,
            hook: None,
            recovered: None,
        }
    }

    pub fn start(config: EngineConfig, catalog: Catalog, store: Arc<ReplicatedStore>) -> EngineResult<Engine> {
        Engine::builder(config, store).start(catalog)
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn db(&self) -> &Arc<Database> {
        &self.db
    }

    pub fn pipeline(&self) -> &Arc<CommitPipeline> {
        &self.pipeline
    }

    pub fn store(&self) -> &Arc<ReplicatedStore> {
        &self.store
    }

    pub fn log_of(&self, worker: usize) -> Option<u16> {
        self.assignment.get(worker).copied()
    }

    /// Takes the release-event receiver; `None` if events are disabled or
    /// the receiver was already taken.
    pub fn release_events(&self) -> Option<Receiver<ReleaseEvent>> {
        self.events_rx.lock().take()
    }

    /// Physical position just past the durable bytes of each log.
    pub fn durable_positions(&self) -> Vec<Lsn> {
        self.durable.iter().map(|d| *d.lock()).collect()
    }

    pub fn begin(&self, worker: usize) -> EngineResult<Transaction> {
        if worker >= self.assignment.len() {
            return Err(EngineError::UnknownWorker(worker));
        }
        Ok(self.db.begin(worker))
    }

    pub fn read(&self, txn: &mut Transaction, table: u32, rid: u64) -> EngineResult<Vec<u8>> {
        Ok(self.db.read(txn, table, rid)?)
    }

    pub fn update(&self, txn: &mut Transaction, table: u32, rid: u64, mask: u64, values: &[u8]) -> EngineResult<()> {
        Ok(self.db.update(txn, table, rid, mask, values)?)
    }

    pub fn insert(&self, txn: &mut Transaction, table: u32, rid: u64, image: &[u8]) -> EngineResult<()> {
        Ok(self.db.insert(txn, table, rid, image)?)
    }

    pub fn delete(&self, txn: &mut Transaction, table: u32, rid: u64) -> EngineResult<()> {
        Ok(self.db.delete(txn, table, rid)?)
    }

    pub fn abort(&self, txn: Transaction) {
        self.db.abort(txn);
    }

    /// Assigns a CSN, publishes the write set, copies the log entry into the
    /// worker's log buffer and queues the transaction for release. On error
    /// the transaction is aborted.
    pub fn precommit(&self, txn: Transaction) -> EngineResult<Precommitted> {
        let enqueue_time = Instant::now();
        let begin_ts = txn.begin_ts();
        if txn.is_read_only() {
            self.db.begin_commit(&txn);
            let csn = self.db.draw_csn();
            self.db.assign_csn(&txn, csn);
            let dsn = txn.dsn();
            self.db.publish(txn);
            self.pipeline.enqueue(PendingCommit {
                csn,
                dsn,
                begin_ts,
                log_id: None,
                end: 0,
                enqueue_time,
            });
            return Ok(Precommitted {
                csn,
                dsn,
                log_id: None,
                bytes: 0,
                end: 0,
            });
        }
        let records = match self.db.delta_records(&txn) {
            Ok(r) => r,
            Err(e) => {
                self.db.abort(txn);
                return Err(e.into());
            }
        };
        let n = encoded_entry_len(&records);
        let log_id = self.assignment[txn.worker()];
        let group = &self.groups[log_id as usize];
        let mut slot = match group.reserve(n) {
            Ok(s) => s,
            Err(e) => {
                self.db.abort(txn);
                return Err(e.into());
            }
        };
        self.db.begin_commit(&txn);
        let end = slot.end;
        let csn = self
            .pipeline
            .draw_and_register(log_id, end, |c| self.db.assign_csn(&txn, c))?;
        let dsn = txn.dsn();
        self.db.publish(txn);
        encode_txn_entry_into(slot.bytes_mut(), csn, dsn, &records)?;
        slot.complete();
        self.pipeline.enqueue(PendingCommit {
            csn,
            dsn,
            begin_ts,
            log_id: Some(log_id),
            end,
            enqueue_time,
        });
        Ok(Precommitted {
            csn,
            dsn,
            log_id: Some(log_id),
            bytes: n,
            end,
        })
    }

    pub fn wait_released(&self, csn: Csn, timeout: Duration) -> bool {
        self.pipeline.wait_released(csn, timeout)
    }

    pub fn stats(&self) -> EngineStats {
        EngineStats {
            released: self.pipeline.release_count(),
            flushes: self.flush_count.load(Ordering::Relaxed),
            seals: self.groups.iter().map(|g| g.seal_counts()).collect(),
            store: self.store.counters(),
        }
    }

    /// Flushes every buffer, releases everything eligible and stops all
    /// threads. Callers must stop issuing transactions first.
    pub fn shutdown(&self) -> EngineResult<EngineStats> {
        for g in &self.groups {
            g.shutdown();
        }
        let mut first_err = None;
        for h in self.flushers.lock().drain(..) {
            match h.join() {
                Ok(Ok(())) => {}
                Ok(Err(e)) => {
                    first_err.get_or_insert(EngineError::Log(e));
                }
                Err(_) => {
                    first_err.get_or_insert(EngineError::ThreadPanicked);
                }
            }
        }
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.releaser.lock().take() {
            if h.join().is_err() {
                first_err.get_or_insert(EngineError::ThreadPanicked);
            }
        }
        self.pipeline.drain_releasable();
        match first_err {
            Some(e) => Err(e),
            None => Ok(self.stats()),
        }
    }
}

impl Drop for Engine {
    fn drop(&mut self) {
        if self.releaser.lock().is_some() {
            let _ = self.shutdown();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::format::Schema;
    use dlog_objstore::SimStore;

    fn engine(cfg: EngineConfig) -> Engine {
        let store = Arc::new(ReplicatedStore::single(Arc::new(SimStore::instant("b"))));
        let catalog = Catalog::new().with_table(1, Schema::fixed(2, 8), 64);
        Engine::start(cfg, catalog, store).unwrap()
    }

    fn small() -> EngineConfig {
        EngineConfig {
            logging: LoggingConfig {
                worker_count: 2,
                group_size: 1,
                buffer_bytes: 4096,
                per_thread_base_bytes: 4096,
                flush_timeout: Some(Duration::from_millis(1)),
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn write_then_read_after_release() {
        let e = engine(small());
        e.db().load(1, 3, &[0u8; 16]).unwrap();
        let mut t = e.begin(0).unwrap();
        e.update(&mut t, 1, 3, 0b10, &7u64.to_le_bytes()).unwrap();
        let p = e.precommit(t).unwrap();
        assert_eq!(p.log_id, Some(0));
        assert!(e.wait_released(p.csn, Duration::from_secs(5)));
        let mut r = e.begin(1).unwrap();
        let img = e.read(&mut r, 1, 3).unwrap();
        assert_eq!(&img[8..], &7u64.to_le_bytes());
        let q = e.precommit(r).unwrap();
        assert_eq!(q.dsn, Dsn(p.csn.0));
        assert!(e.wait_released(q.csn, Duration::from_secs(5)));
        let stats = e.shutdown().unwrap();
        assert_eq!(stats.released, 2);
        assert!(stats.store.appends >= 1);
    }

    #[test]
    fn oversized_entry_aborts_without_csn() {
        let mut cfg = small();
        cfg.logging.buffer_bytes = 1024;
        cfg.logging.per_thread_base_bytes = 1024;
        let e = engine(cfg);
        let before = e.db().next_csn();
        let mut t = e.begin(0).unwrap();
        for rid in 0..64 {
            e.insert(&mut t, 1, rid, &[1u8; 16]).unwrap();
        }
        assert!(matches!(e.precommit(t), Err(EngineError::Log(LogError::EntryTooLarge { .. }))));
        assert_eq!(e.db().next_csn(), before);
        e.shutdown().unwrap();
    }

    #[test]
    fn shutdown_releases_everything_without_timeouts() {
        let mut cfg = small();
        cfg.logging.flush_timeout = None;
        cfg.record_release_log = true;
        let e = engine(cfg);
        let mut csns = Vec::new();
        for i in 0..20u64 {
            let mut t = e.begin((i % 2) as usize).unwrap();
            e.insert(&mut t, 1, i, &[i as u8; 16]).unwrap();
            csns.push(e.precommit(t).unwrap().csn);
        }
        e.shutdown().unwrap();
        let mut log = e.pipeline().release_log().unwrap();
        log.sort();
        assert_eq!(log, csns);
    }
}
