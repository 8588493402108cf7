use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::Context;
use clap::Parser;
use dlog_bench::report::{emit_csv, emit_human};
use dlog_bench::runner::{run, BackendConfig, BackendKind, RunConfig};
use dlog_bench::workload::{Dist, Workload, WorkloadConfig};
use dlog_core::engine::EngineConfig;
use dlog_core::logging::LoggingConfig;
use dlog_core::pipeline::Tracking;
use dlog_objstore::{AckPolicy, Profile, SimMode};

#[derive(Debug, Parser)]
#[command(name = "dlog-bench", about = "Drive YCSB-style workloads against the grouped-log engine")]
struct Args {
    #[arg(long, value_enum, default_value = "ycsb_a")]
    workload: Workload,
    #[arg(long, value_enum, default_value = "uniform")]
    dist: Dist,
    #[arg(long, default_value_t = 0.99)]
    theta: f64,
    /// Defaults to 0.5 for ycsb_a and dep_stress, 0.95 for ycsb_b.
    #[arg(long)]
    read_fraction: Option<f64>,
    #[arg(long, default_value_t = 10)]
    ops_per_txn: usize,
    #[arg(long, default_value_t = 1_000_000)]
    records: u64,
    #[arg(long, default_value_t = 8)]
    threads: usize,
    /// Run length in seconds.
    #[arg(long, default_value_t = 10.0)]
    duration: f64,
    /// Stop after this many committed transactions in total.
    #[arg(long)]
    txn_budget: Option<u64>,
    #[arg(long, value_enum, default_value = "sim")]
    backend: BackendKind,
    #[arg(long, default_value = "express")]
    backend_profile: Profile,
    /// Report modeled latency without sleeping (sim backend only).
    #[arg(long)]
    instant: bool,
    /// Disable latency jitter and tail spikes (sim backend only).
    #[arg(long)]
    no_jitter: bool,
    #[arg(long, default_value_t = 2)]
    group_size: usize,
    /// Per-log buffer size; defaults to group size times the per-thread base.
    #[arg(long)]
    buffer_bytes: Option<usize>,
    #[arg(long, default_value_t = 512 << 10)]
    per_thread_base_bytes: usize,
    #[arg(long, default_value = "record")]
    tracking: Tracking,
    /// 0 disables timeout flushes.
    #[arg(long, default_value_t = 3.0)]
    flush_timeout_ms: f64,
    #[arg(long)]
    append_limit: Option<u32>,
    #[arg(long, default_value_t = 1)]
    replicas: usize,
    #[arg(long, default_value = "all")]
    ack: AckPolicy,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Seed of the simulated latency draws; defaults to --seed.
    #[arg(long)]
    backend_seed: Option<u64>,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Skip fsync on the localdir backend.
    #[arg(long)]
    no_sync: bool,
    /// Label for this run in reports.
    #[arg(long)]
    variant: Option<String>,
}

fn config(a: &Args) -> anyhow::Result<RunConfig> {
    if !(a.duration >= 0.0 && a.duration.is_finite()) {
        anyhow::bail!("--duration must be a non-negative number of seconds");
    }
    if !(a.flush_timeout_ms >= 0.0 && a.flush_timeout_ms.is_finite()) {
        anyhow::bail!("--flush-timeout-ms must be non-negative");
    }
    let mut workload = WorkloadConfig::new(a.workload);
    workload.dist = a.dist;
    workload.theta = a.theta;
    if let Some(r) = a.read_fraction {
        workload.read_fraction = r;
    }
    workload.ops_per_txn = a.ops_per_txn;
    workload.record_count = a.records;
    workload.worker_threads = a.threads;
    workload.duration = Duration::from_secs_f64(a.duration);
    workload.seed = a.seed;
    workload.txn_budget = a.txn_budget;

    let mut logging = LoggingConfig {
        worker_count: a.threads,
        group_size: a.group_size,
        buffer_bytes: a.buffer_bytes.unwrap_or(a.group_size * a.per_thread_base_bytes),
        per_thread_base_bytes: a.per_thread_base_bytes,
        flush_timeout: (a.flush_timeout_ms > 0.0).then(|| Duration::from_secs_f64(a.flush_timeout_ms / 1e3)),
        // an explicit buffer size is taken as given
        proportional: a.buffer_bytes.is_none(),
        ..LoggingConfig::default()
    };
    if let Some(l) = a.append_limit {
        logging.segment_append_limit = l;
    }
    let engine = EngineConfig {
        logging,
        tracking: a.tracking,
        ..EngineConfig::default()
    };
    let backend = BackendConfig {
        kind: a.backend,
        profile: a.backend_profile,
        replicas: a.replicas,
        ack: a.ack,
        data_dir: a.data_dir.clone(),
        jitter: !a.no_jitter,
        seed: a.backend_seed.unwrap_or(a.seed),
        sim_mode: if a.instant { SimMode::Instant } else { SimMode::RealTime },
        sync: !a.no_sync,
        ..BackendConfig::default()
    };
    let variant = a.variant.clone().unwrap_or_else(|| {
        format!("g{}-{}k-{}", a.group_size, engine.logging.buffer_bytes >> 10, a.tracking.name())
    });
    Ok(RunConfig {
        variant,
        workload,
        engine,
        backend,
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    let result = config(&args).and_then(|cfg| {
        log::info!("running {}", cfg.variant);
        run(&cfg).context("benchmark run failed")
    });
    let metrics = match result {
        Ok(m) => m,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let runs = [metrics];
    print!("{}", emit_human(&runs));
    if let Some(path) = &args.csv {
        if let Err(e) = std::fs::write(path, emit_csv(&runs)) {
            eprintln!("error: writing {}: {e}", path.display());
            return ExitCode::from(2);
        }
    }
    if runs[0].valid {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
