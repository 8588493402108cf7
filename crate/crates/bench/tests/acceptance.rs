//! Acceptance suite. Runs every criterion in sequence and prints one
//! PASS/FAIL line per criterion.
//!
//! Criteria whose outcome depends on the host (multi-core scheduling) and are
//! listed in `HOST_BOUND` are reported but do not fail the binary unless
//! `DLOG_ACCEPTANCE_STRICT=1` is set. `DLOG_ACCEPTANCE_ONLY=3,10` runs a
//! subset.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ops::Range;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use dlog_bench::metrics::RunMetrics;
use dlog_bench::runner::{run, BackendConfig, RunConfig};
use dlog_bench::workload::{Dist, Workload, WorkloadConfig};
use dlog_core::checkpoint::{read_footer, take_checkpoint};
use dlog_core::engine::{Engine, EngineConfig, EngineError, FlushHook};
use dlog_core::format::{
    decode_txn_entry, encode_txn_entry, Csn, Decoded, DeltaRecord, Dsn, RecordKind, Schema,
    TxnEntry,
};
use dlog_core::logging::{parse_segment_key, segment_key, FlushRecord, LoggingConfig};
use dlog_core::mvcc::{Catalog, CsnCounter, MvccError};
use dlog_core::pipeline::{CommitPipeline, PendingCommit, Tracking};
use dlog_core::recovery::recover;
use dlog_objstore::{
    estimate_cost, AckPolicy, Appended, CostCounters, LatencyModel, LocalDirStore, ObjectStore,
    OpKind, Pricing, Profile, ReplicatedStore, SimMode, SimStore, StoreError, StoreResult,
};
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (u32, &'static str, fn() -> Outcome);

const KIB: usize = 1024;
const MIB: usize = 1024 * 1024;

/// Criteria that measure wall-clock behavior a single-core host cannot
/// reproduce.
const HOST_BOUND: &[u32] = &[5, 7];

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

// ---------------------------------------------------------------------------
// 1-3: commit pipeline traces

#[derive(Debug, Clone)]
struct TraceTxn {
    csn: u64,
    deps: Vec<usize>,
    log: Option<u16>,
    end: u64,
}

/// A random interleaving of pre-commits and flushes over `logs` logs, applied
/// in lockstep to one pipeline per tracking mode.
struct Trace {
    rng: ChaCha8Rng,
    logs: usize,
    written: Vec<u64>,
    durable: Vec<u64>,
    txns: Vec<TraceTxn>,
    writers: Vec<usize>,
    counters: Vec<Arc<CsnCounter>>,
    pipelines: Vec<CommitPipeline>,
}

impl Trace {
    fn new(seed: u64, logs: usize, modes: &[Tracking]) -> Self {
        let counters: Vec<Arc<CsnCounter>> = modes.iter().map(|_| Arc::new(CsnCounter::default())).collect();
        let pipelines = modes
            .iter()
            .zip(&counters)
            .map(|(&m, c)| CommitPipeline::new(m, c.clone(), logs))
            .collect();
        Trace {
            rng: ChaCha8Rng::seed_from_u64(seed),
            logs,
            written: vec![0; logs],
            durable: vec![0; logs],
            txns: Vec::new(),
            writers: Vec::new(),
            counters,
            pipelines,
        }
    }

    /// Pre-commits one transaction with random dependencies on earlier writers.
    fn precommit(&mut self) {
        let mut deps = Vec::new();
        if !self.writers.is_empty() {
            for _ in 0..self.rng.random_range(0..=3) {
                // favor recent writers, which are more likely to be non-durable
                let back = self.rng.random_range(0..self.writers.len().min(64));
                deps.push(self.writers[self.writers.len() - 1 - back]);
            }
        }
        deps.sort_unstable();
        deps.dedup();
        let dsn = deps.iter().map(|&i| self.txns[i].csn).max().unwrap_or(0);
        let read_only = self.rng.random_bool(0.1);
        let now = Instant::now();
        let (log, end, csn) = if read_only {
            let csns: Vec<u64> = self.counters.iter().map(|c| c.draw().0).collect();
            assert!(csns.windows(2).all(|w| w[0] == w[1]));
            (None, 0, csns[0])
        } else {
            let log = self.rng.random_range(0..self.logs);
            self.written[log] += self.rng.random_range(40..400);
            let end = self.written[log];
            let mut csn = 0;
            for p in &self.pipelines {
                let c = p.draw_and_register(log as u16, end, |_| {}).expect("known log").0;
                assert!(csn == 0 || csn == c);
                csn = c;
            }
            (Some(log as u16), end, csn)
        };
        for p in &self.pipelines {
            p.enqueue(PendingCommit {
                csn: Csn(csn),
                dsn: Dsn(dsn),
                begin_ts: Csn(dsn),
                log_id: log,
                end,
                enqueue_time: now,
            });
        }
        if log.is_some() {
            self.writers.push(self.txns.len());
        }
        self.txns.push(TraceTxn { csn, deps, log, end });
    }

    /// Advances one log's durable frontier by a random amount.
    fn flush(&mut self) {
        let log = self.rng.random_range(0..self.logs);
        let (d, w) = (self.durable[log], self.written[log]);
        if d == w {
            return;
        }
        let to = if self.rng.random_bool(0.5) { w } else { self.rng.random_range(d..=w) };
        self.durable[log] = to;
        for p in &self.pipelines {
            p.update_log_durability(log as u16, to).expect("monotone frontier");
        }
    }

    fn step(&mut self) {
        if self.rng.random_bool(0.6) {
            self.precommit();
        } else {
            self.flush();
        }
    }

    fn own_durable(&self, t: &TraceTxn) -> bool {
        t.log.is_none_or(|l| t.end <= self.durable[l as usize])
    }

    /// gCSN recomputed from the explicit list of pre-committed writers.
    fn brute_gcsn(&self) -> u64 {
        let next = self.counters[0].next().0;
        self.txns
            .iter()
            .filter(|t| t.log.is_some() && !self.own_durable(t))
            .map(|t| t.csn)
            .min()
            .unwrap_or(next)
            .min(next)
    }

    /// Whether each transaction's own bytes and all of its ancestors are
    /// durable, following every dependency edge.
    fn closure_durable(&self) -> Vec<bool> {
        let mut ok = Vec::with_capacity(self.txns.len());
        for t in &self.txns {
            let v = self.own_durable(t) && t.deps.iter().all(|&d| ok[d]);
            ok.push(v);
        }
        ok
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut checks = 0u64;
    for seed in 0..1000u64 {
        let mut tr = Trace::new(seed, 4, &[Tracking::RecordLevel]);
        let target = tr.rng.random_range(1..=2000);
        while tr.txns.len() < target {
            tr.step();
            let got = tr.pipelines[0].compute_gcsn().0;
            let want = tr.brute_gcsn();
            ensure!(got == want, "trace {seed} step {}: gcsn {got}, brute force {want}", tr.txns.len());
            checks += 1;
            if tr.rng.random_bool(0.05) {
                tr.pipelines[0].drain_releasable();
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1}s");
    Ok(format!("1000 traces, {checks} steps matched, {secs:.1}s"))
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let g = dlog_core::pipeline::compute_gcsn([None, Some(Csn(102)), Some(Csn(104)), None], Csn(106));
    ensure!(g == Csn(102), "gcsn {g:?}");

    // T100 and T101 stay in flight on log 1; T102, T104 and T105 are durable
    // on log 0; everything below 100 has committed.
    let counter = Arc::new(CsnCounter::starting_at(Csn(100)));
    let p = CommitPipeline::new(Tracking::RecordLevel, counter.clone(), 2).with_frontiers(&[0, 0]);
    let plan = [(100u64, 1u16, 10u64), (101, 1, 20), (102, 0, 10), (103, 1, 30), (104, 0, 20), (105, 0, 30)];
    for &(csn, log, end) in &plan {
        let c = p.draw_and_register(log, end, |_| {}).map_err(|e| e.to_string())?;
        ensure!(c.0 == csn, "drew {c:?}, expected {csn}");
    }
    let now = Instant::now();
    for (csn, dsn) in [(102u64, 98u64), (104, 102), (105, 99)] {
        p.enqueue(PendingCommit {
            csn: Csn(csn),
            dsn: Dsn(dsn),
            begin_ts: Csn(dsn),
            log_id: Some(0),
            end: plan.iter().find(|x| x.0 == csn).unwrap().2,
            enqueue_time: now,
        });
    }
    p.update_log_durability(0, 30).map_err(|e| e.to_string())?;
    let released: BTreeSet<u64> = p.drain_releasable().iter().map(|e| e.csn.0).collect();
    ensure!(p.last_gcsn() == Csn(100), "gcsn {:?}", p.last_gcsn());
    ensure!(released == BTreeSet::from([102, 105]), "released {released:?}");
    ensure!(!p.is_released(Csn(104)), "T104 released");
    ensure!(p.pending_count() == 1, "pending {}", p.pending_count());
    let ms = start.elapsed().as_secs_f64() * 1e3;
    ensure!(ms < 1000.0, "took {ms:.0} ms");
    Ok("gCSN = 102; releases {T102, T105}, retains T104".into())
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let modes = [Tracking::TxnLevel, Tracking::RecordLevel];
    let (mut txn_total, mut rec_total, mut exact_total) = (0usize, 0usize, 0usize);
    for seed in 0..400u64 {
        let mut tr = Trace::new(10_000 + seed, 4, &modes);
        let mut released: Vec<BTreeSet<u64>> = vec![BTreeSet::new(); modes.len()];
        let target = tr.rng.random_range(50..=1000);
        let mut exact = BTreeSet::new();
        while tr.txns.len() < target || tr.durable != tr.written {
            if tr.txns.len() < target {
                tr.step();
            } else {
                tr.flush();
            }
            let ok = tr.closure_durable();
            exact = tr.txns.iter().zip(&ok).filter(|(_, &d)| d).map(|(t, _)| t.csn).collect();
            for (m, p) in tr.pipelines.iter().enumerate() {
                for ev in p.drain_releasable() {
                    // safety: the closure is durable when the release happens
                    ensure!(
                        exact.contains(&ev.csn.0),
                        "trace {seed}: {} released csn {} with a non-durable closure",
                        modes[m].name(),
                        ev.csn.0
                    );
                    released[m].insert(ev.csn.0);
                }
            }
            ensure!(released[0].is_subset(&released[1]), "trace {seed}: txn-level not within record-level");
            ensure!(released[1].is_subset(&exact), "trace {seed}: record-level not within exact graph");
        }
        // with everything durable all three policies release everything
        ensure!(exact.len() == tr.txns.len(), "trace {seed}: exact oracle incomplete");
        ensure!(released[0].len() == tr.txns.len(), "trace {seed}: txn-level left pendings");
        txn_total += released[0].len();
        rec_total += released[1].len();
        exact_total += exact.len();
        let _ = tr.brute_gcsn();
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 120.0, "took {secs:.1}s");
    Ok(format!("400 traces, txn ⊆ record ⊆ exact at every step ({txn_total}/{rec_total}/{exact_total} final), {secs:.1}s"))
}

// ---------------------------------------------------------------------------
// 4-7: benchmark runs on the sim backend

fn bench_config(
    variant: &str,
    workload: Workload,
    group: usize,
    buffer: usize,
    tracking: Tracking,
    secs: u64,
) -> RunConfig {
    let mut w = WorkloadConfig::new(workload);
    w.record_count = 200_000;
    w.worker_threads = 8;
    w.dist = Dist::Uniform;
    w.duration = Duration::from_secs(secs);
    w.seed = 7;
    RunConfig {
        variant: variant.into(),
        workload: w,
        engine: EngineConfig {
            logging: LoggingConfig {
                worker_count: 8,
                group_size: group,
                buffer_bytes: buffer,
                per_thread_base_bytes: 512 * KIB,
                proportional: false,
                ..LoggingConfig::default()
            },
            tracking,
            ..EngineConfig::default()
        },
        backend: BackendConfig {
            profile: Profile::Express,
            seed: 11,
            ..BackendConfig::default()
        },
    }
}

fn bench(cfg: &RunConfig) -> Result<RunMetrics, String> {
    let m = run(cfg).map_err(|e| format!("{}: {e}", cfg.variant))?;
    ensure!(m.valid, "{}: run invalid: {:?}", cfg.variant, m.error);
    ensure!(m.committed > 0, "{}: nothing committed", cfg.variant);
    println!(
        "    {:<12} {:>9.0} txn/s  avg {:>7.3} ms  p99.9 {:>8.3} ms  appends {}",
        m.variant,
        m.throughput,
        m.latency.mean.as_secs_f64() * 1e3,
        m.latency.p999.as_secs_f64() * 1e3,
        m.appends
    );
    Ok(m)
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let base = 64 * KIB;
    let mk = |variant: &str, group: usize, buffer: usize| {
        let mut c = bench_config(variant, Workload::YcsbA, group, buffer, Tracking::RecordLevel, 600);
        c.workload.record_count = 100_000;
        c.workload.txn_budget = Some(48_000);
        c.engine.logging.per_thread_base_bytes = base;
        // only full buffers are flushed, plus one final flush per log
        c.engine.logging.flush_timeout = None;
        c.backend.sim_mode = SimMode::Instant;
        c
    };
    let one = bench(&mk("g1-B", 1, base))?;
    let two = bench(&mk("g2-2B", 2, 2 * base))?;
    ensure!(
        one.committed == two.committed && one.entry_bytes == two.entry_bytes,
        "replayed traces differ: {}/{} txns, {}/{} bytes",
        one.committed,
        two.committed,
        one.entry_bytes,
        two.entry_bytes
    );
    let ratio = two.appends as f64 / one.appends as f64;
    ensure!((0.45..=0.55).contains(&ratio), "append ratio {ratio:.3} ({} vs {})", two.appends, one.appends);
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1}s");
    Ok(format!("appends {} vs {}: ratio {ratio:.3}", two.appends, one.appends))
}

fn criterion_5() -> Outcome {
    let g1 = bench(&bench_config("g1-512K", Workload::YcsbA, 1, 512 * KIB, Tracking::RecordLevel, 10))?;
    let g2 = bench(&bench_config("g2-1M", Workload::YcsbA, 2, MIB, Tracking::RecordLevel, 10))?;
    let g4 = bench(&bench_config("g4-1M", Workload::YcsbA, 4, MIB, Tracking::RecordLevel, 10))?;
    let parity = (g2.throughput - g1.throughput).abs() / g1.throughput;
    let detail = format!(
        "g2/1M vs g1/512K differ by {:.1}%; g4/1M {:.0} vs g2/1M {:.0} txn/s",
        parity * 100.0,
        g4.throughput,
        g2.throughput
    );
    ensure!(parity <= 0.10, "parity outside 10%: {detail}");
    ensure!(g4.throughput < g2.throughput, "group 4 not slower: {detail}");
    Ok(detail)
}

fn criterion_6() -> Outcome {
    let rec = bench(&bench_config("record", Workload::YcsbB, 2, MIB, Tracking::RecordLevel, 10))?;
    let txn = bench(&bench_config("txn", Workload::YcsbB, 2, MIB, Tracking::TxnLevel, 10))?;
    let (r, t) = (rec.latency.mean.as_secs_f64(), txn.latency.mean.as_secs_f64());
    let drop = 1.0 - r / t;
    let detail = format!("avg {:.3} ms vs {:.3} ms: {:.1}% lower", r * 1e3, t * 1e3, drop * 100.0);
    ensure!(drop >= 0.15, "{detail}");
    Ok(detail)
}

fn criterion_7() -> Outcome {
    let naive = bench(&bench_config("naive", Workload::YcsbA, 1, 512 * KIB, Tracking::TxnLevel, 30))?;
    let combined = bench(&bench_config("combined", Workload::YcsbA, 2, MIB, Tracking::RecordLevel, 30))?;
    let (c, n) = (combined.latency.p999.as_secs_f64(), naive.latency.p999.as_secs_f64());
    let drop = 1.0 - c / n;
    let detail = format!("p99.9 {:.3} ms vs {:.3} ms: {:.1}% lower", c * 1e3, n * 1e3, drop * 100.0);
    ensure!(drop >= 0.30, "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 8-9: latency model and cost

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let express = LatencyModel::for_profile(Profile::Express).without_jitter();
    let standard = LatencyModel::for_profile(Profile::Standard).without_jitter();
    let cases = [
        ("express append 512 KiB", &express, OpKind::Append, 512 * KIB, 8),
        ("express append 2 MiB", &express, OpKind::Append, 2 * MIB, 22),
        ("express get 256 KiB", &express, OpKind::Get, 256 * KIB, 5),
        ("standard put 2 MiB", &standard, OpKind::Put, 2 * MIB, 77),
    ];
    for (name, model, op, size, ms) in cases {
        for _ in 0..100 {
            let got = model.sample(op, size as u64, &mut rng);
            ensure!(got == Duration::from_millis(ms), "{name}: {got:?}, expected {ms} ms");
        }
    }
    Ok("8 / 22 / 5 / 77 ms".into())
}

fn criterion_9() -> Outcome {
    let counters = CostCounters {
        appends: 1_000_000,
        bytes_uploaded: 1_000_000 * 2_000_000,
        ..CostCounters::default()
    };
    let cost = estimate_cost(&counters, &Pricing::default());
    ensure!((cost - 7.53).abs() <= 0.01, "${cost:.4}");
    Ok(format!("${cost:.4}"))
}

// ---------------------------------------------------------------------------
// 10: crash injection

/// Read-only view of a local directory as it was after a prefix of flushes:
/// log segments are cut to the length they had then and later ones are
/// hidden. Other objects pass through.
struct CrashView {
    inner: Arc<LocalDirStore>,
    lens: HashMap<String, u64>,
}

impl CrashView {
    fn log_len(&self, key: &str) -> Option<StoreResult<u64>> {
        parse_segment_key(key)?;
        Some(self.lens.get(key).copied().ok_or_else(|| StoreError::NotFound(key.into())))
    }
}

impl ObjectStore for CrashView {
    fn bucket(&self) -> &str {
        self.inner.bucket()
    }
    fn append(&self, _: &str, _: u64, _: &[u8]) -> StoreResult<Appended> {
        Err(StoreError::Unavailable("crash view is read-only".into()))
    }
    fn get(&self, key: &str, range: Option<Range<u64>>) -> StoreResult<Vec<u8>> {
        match self.log_len(key) {
            None => self.inner.get(key, range),
            Some(len) => {
                let len = len?;
                let r = range.unwrap_or(0..len);
                if r.start > r.end || r.end > len {
                    return Err(StoreError::RangeInvalid { start: r.start, end: r.end, len });
                }
                self.inner.get(key, Some(r))
            }
        }
    }
    fn size(&self, key: &str) -> StoreResult<u64> {
        self.log_len(key).unwrap_or_else(|| self.inner.size(key))
    }
    fn put(&self, _: &str, _: &[u8]) -> StoreResult<()> {
        Err(StoreError::Unavailable("crash view is read-only".into()))
    }
    fn delete(&self, _: &str) -> StoreResult<()> {
        Err(StoreError::Unavailable("crash view is read-only".into()))
    }
    fn list(&self, prefix: &str) -> StoreResult<Vec<String>> {
        Ok(self
            .inner
            .list(prefix)?
            .into_iter()
            .filter(|k| parse_segment_key(k).is_none() || self.lens.contains_key(k))
            .collect())
    }
    fn counters(&self) -> CostCounters {
        self.inner.counters()
    }
}

const CRASH_TABLE: u32 = 1;
const CRASH_FIELDS: usize = 4;
const CRASH_LOADED: u64 = 32;
const CRASH_RIDS: u64 = 48;

#[derive(Debug, Clone)]
enum Write {
    Set { rid: u64, field: usize, value: u64 },
    Insert { rid: u64, image: Vec<u8> },
    Delete { rid: u64 },
}

#[derive(Debug, Clone)]
struct Committed {
    csn: u64,
    dsn: u64,
    log: u16,
    end: u64,
    writes: Vec<Write>,
}

fn crash_image(tag: u64) -> Vec<u8> {
    (0..CRASH_FIELDS as u64).flat_map(|f| (tag * 16 + f).to_le_bytes()).collect()
}

/// One random transaction. `Ok(None)` when it conflicted and was aborted.
fn crash_txn(engine: &Engine, worker: usize, rng: &mut ChaCha8Rng) -> Result<Option<Committed>, EngineError> {
    let mut txn = engine.begin(worker)?;
    let mut writes = Vec::new();
    let retry = |e: &EngineError| {
        matches!(
            e,
            EngineError::Mvcc(MvccError::WriteConflict { .. } | MvccError::DuplicateRid { .. })
        )
    };
    for _ in 0..rng.random_range(1..=4) {
        let rid = rng.random_range(0..CRASH_RIDS);
        let present = match engine.read(&mut txn, CRASH_TABLE, rid) {
            Ok(_) => true,
            Err(EngineError::Mvcc(MvccError::NotFound { .. })) => false,
            Err(e) => {
                engine.abort(txn);
                return Err(e);
            }
        };
        if rng.random_bool(0.4) {
            continue;
        }
        let (r, w) = if !present {
            let image = crash_image(rng.random_range(0..1_000_000));
            (engine.insert(&mut txn, CRASH_TABLE, rid, &image), Write::Insert { rid, image })
        } else if rng.random_bool(0.8) {
            let field = rng.random_range(0..CRASH_FIELDS);
            let value: u64 = rng.random();
            (
                engine.update(&mut txn, CRASH_TABLE, rid, 1 << field, &value.to_le_bytes()),
                Write::Set { rid, field, value },
            )
        } else {
            (engine.delete(&mut txn, CRASH_TABLE, rid), Write::Delete { rid })
        };
        match r {
            Ok(()) => writes.push(w),
            Err(e) => {
                engine.abort(txn);
                return if retry(&e) { Ok(None) } else { Err(e) };
            }
        }
    }
    let p = engine.precommit(txn)?;
    Ok(p.log_id.map(|log| Committed {
        csn: p.csn.0,
        dsn: p.dsn.0,
        log,
        end: p.end,
        writes,
    }))
}

/// Whether every row the transaction only updated (no insert or delete of
/// it in the same transaction) is present.
fn fits(state: &BTreeMap<u64, (u64, Vec<u8>)>, t: &Committed) -> bool {
    let mut update_only: HashMap<u64, bool> = HashMap::new();
    for w in &t.writes {
        match w {
            Write::Set { rid, .. } => {
                update_only.entry(*rid).or_insert(true);
            }
            Write::Insert { rid, .. } | Write::Delete { rid } => {
                update_only.insert(*rid, false);
            }
        }
    }
    update_only.iter().all(|(rid, &u)| !u || state.contains_key(rid))
}

fn apply(state: &mut BTreeMap<u64, (u64, Vec<u8>)>, t: &Committed) {
    for w in &t.writes {
        match w {
            Write::Set { rid, field, value } => {
                // only reachable when a later write in the same txn deletes it
                let Some((c, img)) = state.get_mut(rid) else { continue };
                img[field * 8..field * 8 + 8].copy_from_slice(&value.to_le_bytes());
                *c = t.csn;
            }
            Write::Insert { rid, image } => {
                state.insert(*rid, (t.csn, image.clone()));
            }
            Write::Delete { rid } => {
                state.remove(rid);
            }
        }
    }
}

/// Runs one trace and checks recovery after every prefix of its flushes.
/// Returns (transactions, boundaries).
fn crash_trace(seed: u64) -> Result<(usize, usize), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let group = rng.random_range(1..=2usize);
    let workers = group * rng.random_range(1..=2usize) + rng.random_range(0..=1usize);
    let buffer = rng.random_range(384..=2048usize);
    let logging = LoggingConfig {
        worker_count: workers,
        group_size: group,
        buffer_bytes: buffer,
        per_thread_base_bytes: buffer,
        proportional: false,
        flush_timeout: rng.random_bool(0.25).then(|| Duration::from_millis(2)),
        segment_append_limit: rng.random_range(2..=6),
        ..LoggingConfig::default()
    };
    let cfg = EngineConfig {
        logging,
        tracking: Tracking::RecordLevel,
        ..EngineConfig::default()
    };
    let catalog = Catalog::new().with_table(CRASH_TABLE, Schema::fixed(CRASH_FIELDS, 8), CRASH_RIDS);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let local = Arc::new(LocalDirStore::open(dir.path(), "crash").map_err(|e| e.to_string())?.without_sync());
    let store = Arc::new(ReplicatedStore::single(local.clone()));
    let flushes: Arc<Mutex<Vec<FlushRecord>>> = Arc::default();
    let sink = flushes.clone();
    let hook: FlushHook = Arc::new(move |r: &FlushRecord| sink.lock().push(r.clone()));
    let engine = Engine::builder(cfg, store)
        .flush_hook(hook)
        .start(catalog.clone())
        .map_err(|e| e.to_string())?;
    for rid in 0..CRASH_LOADED {
        engine.db().load(CRASH_TABLE, rid, &crash_image(rid)).map_err(|e| e.to_string())?;
    }
    let ckpt = take_checkpoint(&engine, Duration::from_secs(10)).map_err(|e| e.to_string())?;

    let total = rng.random_range(500..=700usize);
    let history: Mutex<Vec<Committed>> = Mutex::new(Vec::new());
    let failure: Mutex<Option<String>> = Mutex::new(None);
    std::thread::scope(|s| {
        for w in 0..workers {
            let (engine, history, failure) = (&engine, &history, &failure);
            let mut wrng = ChaCha8Rng::seed_from_u64(seed * 1000 + w as u64);
            let quota = total / workers + usize::from(w < total % workers);
            s.spawn(move || {
                let mut done = 0;
                while done < quota {
                    match crash_txn(engine, w, &mut wrng) {
                        Ok(Some(c)) => {
                            history.lock().push(c);
                            done += 1;
                        }
                        Ok(None) if wrng.random_bool(0.5) => std::thread::yield_now(),
                        Ok(None) => {}
                        Err(e) => {
                            failure.lock().get_or_insert(e.to_string());
                            return;
                        }
                    }
                }
            });
        }
    });
    if let Some(e) = failure.into_inner() {
        return Err(format!("trace {seed}: {e}"));
    }
    engine.shutdown().map_err(|e| e.to_string())?;
    let mut history = history.into_inner();
    history.sort_by_key(|c| c.csn);
    let by_csn: HashMap<u64, usize> = history.iter().enumerate().map(|(i, c)| (c.csn, i)).collect();
    let flushes = flushes.lock().clone();

    let mut base = BTreeMap::new();
    for rid in 0..CRASH_LOADED {
        base.insert(rid, (0u64, crash_image(rid)));
    }
    let logs = engine.config().logging.log_count();
    let mut lens = HashMap::new();
    let mut frontier = vec![0u64; logs];
    for k in 0..=flushes.len() {
        if k > 0 {
            let r = &flushes[k - 1];
            lens.insert(r.key.clone(), r.offset + r.bytes);
            frontier[r.log_id as usize] = r.durable_end;
        }
        let ctx = |m: String| format!("trace {seed} boundary {k}/{}: {m}", flushes.len());
        let durable = |c: &Committed| c.end <= frontier[c.log as usize];

        // expected: durable entries whose DSN chain reaches the checkpoint or a
        // load, skipping any whose row writes do not fit the state built so far
        let mut expected: Vec<u64> = Vec::new();
        let mut kept = BTreeSet::new();
        let mut state = base.clone();
        for c in &history {
            let root = c.dsn == 0 || c.dsn <= ckpt.checkpoint_ts.0;
            if durable(c) && (root || kept.contains(&c.dsn)) && fits(&state, c) {
                apply(&mut state, c);
                kept.insert(c.csn);
                expected.push(c.csn);
            }
        }
        // every transaction the record-level rule could have released by now
        let g = history.iter().filter(|c| !durable(c)).map(|c| c.csn).min().unwrap_or(u64::MAX);
        for c in history.iter().filter(|c| durable(c) && c.dsn < g) {
            if !kept.contains(&c.csn) {
                return Err(ctx(format!("releasable csn {} not in the durable closure", c.csn)));
            }
        }

        let view = CrashView {
            inner: local.clone(),
            lens: lens.clone(),
        };
        let rec = recover(&view, catalog.clone()).map_err(|e| ctx(e.to_string()))?;
        let replayed: Vec<u64> = rec.replayed.iter().map(|c| c.0).collect();
        if replayed != expected {
            let missing: Vec<_> = expected.iter().filter(|c| !replayed.contains(c)).take(5).collect();
            let extra: Vec<_> = replayed.iter().filter(|c| !expected.contains(c)).take(5).collect();
            return Err(ctx(format!("replayed set differs: missing {missing:?}, extra {extra:?}")));
        }
        for &csn in &replayed {
            let mut d = history[by_csn[&csn]].dsn;
            while d > ckpt.checkpoint_ts.0 {
                let anc = &history[by_csn[&d]];
                if !durable(anc) {
                    return Err(ctx(format!("csn {csn} replayed with non-durable ancestor {d}")));
                }
                d = anc.dsn;
            }
        }
        let got: BTreeMap<u64, (u64, Vec<u8>)> = rec
            .state()
            .iter()
            .map(|(&(_, rid), (c, img))| (rid, (c.0, img.clone())))
            .collect();
        if got != state {
            let diff = state
                .iter()
                .find(|(rid, v)| got.get(rid) != Some(v))
                .map(|(rid, _)| *rid)
                .or_else(|| got.keys().find(|r| !state.contains_key(r)).copied());
            return Err(ctx(format!("recovered images differ at rid {diff:?}")));
        }
        let max_seen = history.iter().filter(|c| durable(c)).map(|c| c.csn).max().unwrap_or(0);
        if rec.next_csn.0 <= max_seen {
            return Err(ctx(format!("next csn {} not above {max_seen}", rec.next_csn.0)));
        }
    }
    Ok((history.len(), flushes.len() + 1))
}

fn criterion_10() -> Outcome {
    let start = Instant::now();
    let (mut txns, mut boundaries, mut min_txns) = (0, 0, usize::MAX);
    for seed in 0..200u64 {
        let (t, b) = crash_trace(seed)?;
        txns += t;
        boundaries += b;
        min_txns = min_txns.min(t);
    }
    ensure!(min_txns >= 500, "a trace had only {min_txns} transactions");
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 600.0, "took {secs:.1}s");
    Ok(format!("200 traces, {txns} txns, {boundaries} crash points recovered exactly, {secs:.1}s"))
}

// ---------------------------------------------------------------------------
// 11: segments

fn segment_run(limit: u32, extra: u64) -> Result<String, String> {
    let sim = Arc::new(SimStore::instant("segments"));
    let store = Arc::new(ReplicatedStore::single(sim.clone()));
    let txns = 2 * limit as u64 + extra;
    let catalog = Catalog::new().with_table(1, Schema::fixed(1, 8), txns);
    let cfg = EngineConfig {
        logging: LoggingConfig {
            worker_count: 1,
            group_size: 1,
            // one 68-byte entry per buffer: every transaction is its own flush
            buffer_bytes: 128,
            per_thread_base_bytes: 128,
            flush_timeout: None,
            segment_append_limit: limit,
            ..LoggingConfig::default()
        },
        ..EngineConfig::default()
    };
    let engine = Engine::start(cfg, catalog.clone(), store.clone()).map_err(|e| e.to_string())?;
    for rid in 0..txns {
        let mut t = engine.begin(0).map_err(|e| e.to_string())?;
        engine.insert(&mut t, 1, rid, &(rid * 3).to_le_bytes()).map_err(|e| e.to_string())?;
        engine.precommit(t).map_err(|e| e.to_string())?;
    }
    let stats = engine.shutdown().map_err(|e| e.to_string())?;
    ensure!(stats.flushes == txns, "{} flushes for {txns} transactions", stats.flushes);

    let keys = store.list("log-").map_err(|e| e.to_string())?;
    let expect: Vec<String> = (0..3).map(|i| segment_key(0, i)).collect();
    let sorted: BTreeSet<&String> = keys.iter().collect();
    ensure!(sorted == expect.iter().collect::<BTreeSet<_>>(), "segments {keys:?}, expected {expect:?}");
    let mut first_csn = 1;
    for (i, key) in expect.iter().enumerate() {
        ensure!(parse_segment_key(key) == Some((0, i as u32)), "{key} does not parse back");
        let parts = sim.part_count(key).unwrap_or(0);
        let footer = read_footer(&*store, key).map_err(|e| e.to_string())?;
        if i < 2 {
            ensure!(parts == limit, "{key}: {parts} parts, expected {limit}");
            let f = footer.ok_or(format!("{key} is not sealed"))?;
            ensure!(f.entry_count == limit as u64, "{key}: footer counts {} entries", f.entry_count);
            ensure!(
                f.min_csn.0 == first_csn && f.max_csn.0 == first_csn + limit as u64 - 1,
                "{key}: footer csns {:?}..{:?}",
                f.min_csn,
                f.max_csn
            );
            first_csn += limit as u64;
        } else {
            ensure!(parts as u64 == extra, "{key}: {parts} parts, expected {extra}");
            ensure!(footer.is_none(), "{key}: last segment sealed");
        }
    }
    let rec = recover(&*store, catalog).map_err(|e| e.to_string())?;
    ensure!(rec.replayed.len() as u64 == txns, "replayed {} of {txns}", rec.replayed.len());
    for rid in 0..txns {
        let want = (rid * 3).to_le_bytes();
        ensure!(rec.get(1, rid) == Some(&want[..]), "rid {rid} not recovered");
    }
    Ok(format!("limit {limit}: 2 sealed segments of {limit} parts + tail of {extra}"))
}

fn criterion_11() -> Outcome {
    let start = Instant::now();
    let small = segment_run(100, 17)?;
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "limit 100 took {secs:.1}s");
    let spot = segment_run(10_000, 5)?;
    Ok(format!("{small}; {spot}"))
}

// ---------------------------------------------------------------------------
// 12: format robustness

fn decode_prefix(bytes: &[u8]) -> Result<Vec<TxnEntry>, String> {
    let mut out = Vec::new();
    let mut off = 0;
    while off < bytes.len() {
        match decode_txn_entry(bytes, off) {
            Ok(Decoded::Entry { entry, next_offset }) => {
                out.push(entry);
                off = next_offset;
            }
            Ok(Decoded::TornTail) => break,
            Err(e) => return Err(e.to_string()),
        }
    }
    Ok(out)
}

fn criterion_12() -> Outcome {
    let start = Instant::now();
    let mut log = Vec::new();
    let specs = [(RecordKind::Insert, 0b1111u64), (RecordKind::Update, 0b0101), (RecordKind::Delete, 0)];
    for (i, (kind, mask)) in specs.into_iter().enumerate() {
        let rec = DeltaRecord {
            kind,
            table_id: 3,
            rid: 40 + i as u64,
            field_mask: mask,
            payload: (0..mask.count_ones() as usize * 8).map(|b| (b * 7 + i) as u8).collect(),
        };
        log.extend(encode_txn_entry(Csn(20 + i as u64), Dsn(10 + i as u64), &[rec]).map_err(|e| e.to_string())?);
    }
    let clean = decode_prefix(&log)?;
    ensure!(clean.len() == 3, "clean log decodes to {} entries", clean.len());
    let mut cases = 0;
    for pos in 0..log.len() {
        for flip in 1..=255u8 {
            let mut bad = log.clone();
            bad[pos] ^= flip;
            let got = decode_prefix(&bad).map_err(|e| format!("byte {pos} ^ {flip:#04x}: error {e}"))?;
            ensure!(got.len() < 3, "byte {pos} ^ {flip:#04x}: corruption undetected");
            ensure!(clean[..got.len()] == got[..], "byte {pos} ^ {flip:#04x}: mis-decoded entry");
            cases += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1}s");
    Ok(format!("{} bytes x 255 values = {cases} corruptions, all torn at or before the damage", log.len()))
}

// ---------------------------------------------------------------------------
// 13: replication

fn criterion_13() -> Outcome {
    let start = Instant::now();
    let model = LatencyModel::for_profile(Profile::Express);
    let seeds = [101u64, 202, 303];
    let mut worst = Duration::ZERO;
    for ack in [AckPolicy::Majority, AckPolicy::All] {
        let replicas: Vec<Arc<dyn ObjectStore>> = seeds
            .iter()
            .enumerate()
            .map(|(i, &s)| Arc::new(SimStore::new(format!("replica-{i}"), model.clone(), SimMode::Instant, s)) as Arc<dyn ObjectStore>)
            .collect();
        let store = ReplicatedStore::new(replicas, ack).map_err(|e| e.to_string())?;
        let mut mirrors: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
        let mut sizes = ChaCha8Rng::seed_from_u64(9);
        let mut len = 0u64;
        for i in 0..1000 {
            let size = if i % 20 == 7 { sizes.random_range(512 * KIB..2 * MIB) } else { sizes.random_range(1..8 * KIB) };
            let payload = vec![i as u8; size];
            let op = if len == 0 { OpKind::Put } else { OpKind::Append };
            let mut want: Vec<Duration> = mirrors.iter_mut().map(|r| model.sample(op, size as u64, r)).collect();
            let a = store.replicated_append("log", len, &payload).map_err(|e| e.to_string())?;
            len = a.new_length;
            want.sort();
            let target = match ack {
                AckPolicy::Majority => want[1],
                AckPolicy::All => want[2],
            };
            let err = a.ack_time.abs_diff(target);
            worst = worst.max(err);
            ensure!(
                err <= Duration::from_millis(1),
                "{ack:?} flush {i}: ack {:?}, replica latencies {want:?}",
                a.ack_time
            );
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 30.0, "took {secs:.1}s");
    Ok(format!("1000 flushes x 2 policies, worst deviation {worst:?}"))
}

// ---------------------------------------------------------------------------

fn main() {
    let only: Option<BTreeSet<u32>> = std::env::var("DLOG_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let strict = std::env::var("DLOG_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let criteria: [Criterion; 13] = [
        (1, "gCSN oracle equivalence", criterion_1),
        (2, "worked release examples", criterion_2),
        (3, "release-policy ordering", criterion_3),
        (4, "append request reduction", criterion_4),
        (5, "throughput parity", criterion_5),
        (6, "record-level latency benefit", criterion_6),
        (7, "tail-latency benefit", criterion_7),
        (8, "latency-model calibration", criterion_8),
        (9, "cost arithmetic", criterion_9),
        (10, "crash-recovery soundness", criterion_10),
        (11, "segment mechanics", criterion_11),
        (12, "format robustness", criterion_12),
        (13, "replication policy", criterion_13),
    ];
    let mut hard_failures = 0;
    let mut lines = Vec::new();
    for (n, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        println!("criterion {n:>2}: {name} ...");
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        let line = match &outcome {
            Ok(detail) => format!("PASS criterion {n:>2} {name} ({secs:.1}s): {detail}"),
            Err(detail) if HOST_BOUND.contains(&n) && !strict => {
                format!("FAIL criterion {n:>2} {name} ({secs:.1}s) [host-bound, not fatal]: {detail}")
            }
            Err(detail) => {
                hard_failures += 1;
                format!("FAIL criterion {n:>2} {name} ({secs:.1}s): {detail}")
            }
        };
        println!("{line}");
        lines.push(line);
    }
    println!("\nacceptance summary:");
    for l in &lines {
        println!("{l}");
    }
    if hard_failures > 0 {
        std::process::exit(1);
    }
}
