//! Loads data, drives worker threads against an engine and collects metrics.

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use clap::ValueEnum;
use dlog_core::engine::{Engine, EngineConfig, EngineError};
use dlog_core::format::Schema;
use dlog_core::mvcc::{Catalog, MvccError};
use dlog_objstore::{
    estimate_cost, AckPolicy, LatencyModel, LocalDirStore, ObjectStore, Pricing, Profile,
    ReplicatedStore, S3Config, S3Store, SimMode, SimStore, StoreError,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;
use thiserror::Error;

use crate::keys::KeyChooser;
use crate::metrics::{LatencySummary, RunMetrics};
use crate::workload::{
    Workload, WorkloadConfig, WorkloadError, FIELDS, FIELD_BYTES, HANDOFF_FRACTION,
};

pub const TABLE: u32 = 1;
pub const HANDOFF_TABLE: u32 = 2;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("worker thread panicked")]
    Panicked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    Sim,
    Localdir,
    S3,
}

#[derive(Debug, Clone)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub profile: Profile,
    pub replicas: usize,
    pub ack: AckPolicy,
    /// Root for the local-directory backend; a temporary directory if unset.
    pub data_dir: Option<PathBuf>,
    pub jitter: bool,
    pub seed: u64,
    pub sim_mode: SimMode,
    /// fsync on the local-directory backend.
    pub sync: bool,
    pub bucket_prefix: String,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Sim,
            profile: Profile::Express,
            replicas: 1,
            ack: AckPolicy::All,
            data_dir: None,
            jitter: true,
            seed: 1,
            sim_mode: SimMode::RealTime,
            sync: true,
            bucket_prefix: "dlog-bench".into(),
        }
    }
}

/// A replicated store plus the temporary directory backing it, if any.
pub struct Backend {
    pub store: Arc<ReplicatedStore>,
    _tmp: Option<TempDir>,
}

impl BackendConfig {
    pub fn build(&self) -> Result<Backend, RunError> {
        if self.replicas == 0 {
            return Err(RunError::Config("replicas must be at least 1".into()));
        }
        let bucket = |i: usize| format!("{}-{i}", self.bucket_prefix);
        let mut tmp = None;
        let mut replicas: Vec<Arc<dyn ObjectStore>> = Vec::with_capacity(self.replicas);
        match self.kind {
            BackendKind::Sim => {
                let mut model = LatencyModel::for_profile(self.profile);
                if !self.jitter {
                    model = model.without_jitter();
                }
                for i in 0..self.replicas {
                    let seed = self.seed.wrapping_add(i as u64);
                    replicas.push(Arc::new(SimStore::new(bucket(i), model.clone(), self.sim_mode, seed)));
                }
            }
            BackendKind::Localdir => {
                let root = match &self.data_dir {
                    Some(d) => d.clone(),
                    None => {
                        let t = tempfile::tempdir().map_err(StoreError::from)?;
                        let p = t.path().to_path_buf();
                        tmp = Some(t);
                        p
                    }
                };
                for i in 0..self.replicas {
                    let mut s = LocalDirStore::open(&root, bucket(i))?;
                    if !self.sync {
                        s = s.without_sync();
                    }
                    replicas.push(Arc::new(s));
                }
            }
            BackendKind::S3 => {
                for i in 0..self.replicas {
                    replicas.push(Arc::new(S3Store::new(S3Config::from_env(bucket(i))?)?));
                }
            }
        }
        Ok(Backend {
            store: Arc::new(ReplicatedStore::new(replicas, self.ack)?),
            _tmp: tmp,
        })
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub variant: String,
    pub workload: WorkloadConfig,
    /// `logging.worker_count` is overridden by the workload's thread count.
    pub engine: EngineConfig,
    pub backend: BackendConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Read { table: u32, rid: u64 },
    /// Reads the record, then overwrites one field.
    Rmw { table: u32, rid: u64, field: u8, value: u64 },
}

/// Generates one worker's transactions.
pub struct TxnGenerator {
    workload: Workload,
    keys: KeyChooser,
    ops: usize,
    read_fraction: f64,
    own_log: u16,
    logs: u16,
}

impl TxnGenerator {
    pub fn new(cfg: &WorkloadConfig, own_log: u16, logs: u16) -> Result<Self, WorkloadError> {
        Ok(TxnGenerator {
            workload: cfg.workload,
            keys: KeyChooser::new(cfg.dist, cfg.record_count, cfg.theta)?,
            ops: cfg.ops_per_txn,
            read_fraction: cfg.read_fraction,
            own_log,
            logs,
        })
    }

    fn point<R: Rng + ?Sized>(&self, rng: &mut R) -> Op {
        let rid = self.keys.sample(rng);
        if rng.random_bool(self.read_fraction) {
            Op::Read { table: TABLE, rid }
        } else {
            Op::Rmw {
                table: TABLE,
                rid,
                field: rng.random_range(0..FIELDS as u8),
                value: rng.random(),
            }
        }
    }

    pub fn next_txn<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Op> {
        let mut ops = Vec::with_capacity(self.ops + 1);
        for _ in 0..self.ops {
            if self.workload == Workload::DepStress && self.logs > 1 && rng.random_bool(HANDOFF_FRACTION) {
                let mut other = rng.random_range(0..self.logs - 1);
                if other >= self.own_log {
                    other += 1;
                }
                ops.push(Op::Read {
                    table: HANDOFF_TABLE,
                    rid: other as u64,
                });
            } else {
                ops.push(self.point(rng));
            }
        }
        if self.workload == Workload::DepStress && rng.random_bool(0.5) {
            ops.push(Op::Rmw {
                table: HANDOFF_TABLE,
                rid: self.own_log as u64,
                field: rng.random_range(0..FIELDS as u8),
                value: rng.random(),
            });
        }
        ops
    }
}

pub fn catalog(cfg: &WorkloadConfig, logs: usize) -> Catalog {
    let schema = Schema::fixed(FIELDS, FIELD_BYTES as u16);
    let mut c = Catalog::new().with_table(TABLE, schema.clone(), cfg.record_count);
    if cfg.workload == Workload::DepStress {
        c = c.with_table(HANDOFF_TABLE, schema, logs as u64);
    }
    c
}

pub fn initial_image(rid: u64) -> Vec<u8> {
    (0..FIELDS as u64)
        .flat_map(|f| (rid * FIELDS as u64 + f).to_le_bytes())
        .collect()
}

/// Bulk-loads every table outside the log.
pub fn load(engine: &Engine, cfg: &WorkloadConfig) -> Result<(), RunError> {
    let db = engine.db();
    for rid in 0..cfg.record_count {
        db.load(TABLE, rid, &initial_image(rid)).map_err(EngineError::from)?;
    }
    if cfg.workload == Workload::DepStress {
        let logs = engine.config().logging.log_count() as u64;
        for rid in 0..logs {
            db.load(HANDOFF_TABLE, rid, &initial_image(rid)).map_err(EngineError::from)?;
        }
    }
    Ok(())
}

fn execute(engine: &Engine, worker: usize, ops: &[Op]) -> Result<usize, EngineError> {
    let mut txn = engine.begin(worker)?;
    for op in ops {
        let r = match *op {
            Op::Read { table, rid } => engine.read(&mut txn, table, rid).map(drop),
            Op::Rmw { table, rid, field, value } => engine
                .read(&mut txn, table, rid)
                .and_then(|_| engine.update(&mut txn, table, rid, 1 << field, &value.to_le_bytes())),
        };
        if let Err(e) = r {
            engine.abort(txn);
            return Err(e);
        }
    }
    Ok(engine.precommit(txn)?.bytes)
}

fn is_conflict(e: &EngineError) -> bool {
    matches!(e, EngineError::Mvcc(MvccError::WriteConflict { .. }))
}

#[derive(Debug, Default)]
struct WorkerTally {
    committed: u64,
    aborted: u64,
    read_only: u64,
    entry_bytes: u64,
    error: Option<String>,
}

fn worker_seed(seed: u64, worker: usize) -> u64 {
    seed ^ (worker as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn drive(
    engine: &Engine,
    gen: &TxnGenerator,
    worker: usize,
    seed: u64,
    quota: Option<u64>,
    deadline: Instant,
    stop: &AtomicBool,
) -> WorkerTally {
    let mut rng = ChaCha8Rng::seed_from_u64(worker_seed(seed, worker));
    let mut t = WorkerTally::default();
    'txns: while quota.is_none_or(|q| t.committed < q) {
        if stop.load(Ordering::Relaxed) || Instant::now() >= deadline {
            break;
        }
        let ops = gen.next_txn(&mut rng);
        loop {
            match execute(engine, worker, &ops) {
                Ok(bytes) => {
                    t.committed += 1;
                    t.entry_bytes += bytes as u64;
                    if bytes == 0 {
                        t.read_only += 1;
                    }
                    break;
                }
                Err(e) if is_conflict(&e) => {
                    t.aborted += 1;
                    if stop.load(Ordering::Relaxed) || Instant::now() >= deadline {
                        break 'txns;
                    }
                    thread::yield_now();
                }
                Err(e) => {
                    t.error = Some(e.to_string());
                    stop.store(true, Ordering::Relaxed);
                    break 'txns;
                }
            }
        }
    }
    t
}

/// Runs one benchmark variant end to end.
pub fn run(cfg: &RunConfig) -> Result<RunMetrics, RunError> {
    let w = &cfg.workload;
    w.validate()?;
    let mut engine_cfg = cfg.engine.clone();
    engine_cfg.logging.worker_count = w.worker_threads;
    engine_cfg.emit_events = true;
    engine_cfg
        .logging
        .validate()
        .map_err(|e| RunError::Config(e.to_string()))?;
    let logs = engine_cfg.logging.log_count();
    let backend = cfg.backend.build()?;
    let engine = Engine::start(engine_cfg.clone(), catalog(w, logs), backend.store.clone())?;
    load(&engine, w)?;

    let rx = engine.release_events().expect("events enabled");
    let collector = thread::spawn(move || rx.iter().map(|e| e.latency()).collect::<Vec<Duration>>());

    let generators = (0..w.worker_threads)
        .map(|i| {
            let own = engine.log_of(i).expect("worker in range");
            TxnGenerator::new(w, own, logs as u16)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let stop = AtomicBool::new(false);
    let start = Instant::now();
    let deadline = start + w.duration;
    let tallies: Vec<WorkerTally> = thread::scope(|s| {
        let handles: Vec<_> = generators
            .iter()
            .enumerate()
            .map(|(i, gen)| {
                let quota = w.txn_budget.map(|b| {
                    let n = w.worker_threads as u64;
                    b / n + u64::from((i as u64) < b % n)
                });
                let (engine, stop) = (&engine, &stop);
                s.spawn(move || drive(engine, gen, i, w.seed, quota, deadline, stop))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().map_err(|_| RunError::Panicked))
            .collect::<Result<Vec<_>, _>>()
    })?;
    let elapsed = start.elapsed();

    let shutdown = engine.shutdown();
    let counters = backend.store.counters();
    drop(engine);
    let samples = collector.join().map_err(|_| RunError::Panicked)?;

    let mut error = tallies.iter().find_map(|t| t.error.clone());
    if let Err(e) = &shutdown {
        error.get_or_insert(e.to_string());
    }
    let committed = tallies.iter().map(|t| t.committed).sum::<u64>();
    let secs = elapsed.as_secs_f64();
    Ok(RunMetrics {
        variant: cfg.variant.clone(),
        workload: w.workload.name().into(),
        dist: w.dist.name().into(),
        threads: w.worker_threads,
        group_size: engine_cfg.logging.group_size,
        buffer_bytes: engine_cfg.logging.buffer_bytes,
        tracking: engine_cfg.tracking.name().into(),
        committed,
        aborted: tallies.iter().map(|t| t.aborted).sum(),
        read_only: tallies.iter().map(|t| t.read_only).sum(),
        elapsed,
        throughput: if secs > 0.0 { committed as f64 / secs } else { 0.0 },
        latency: LatencySummary::from_samples(samples),
        appends: counters.appends,
        bytes: counters.bytes_uploaded,
        entry_bytes: tallies.iter().map(|t| t.entry_bytes).sum(),
        cost_usd: estimate_cost(&counters, &Pricing::default()),
        valid: error.is_none(),
        error,
    })
}
