//! Benchmark harness: YCSB-style and dependency-stress workloads driven
//! against the grouped-log commit engine.

pub mod keys;
pub mod metrics;
pub mod report;
pub mod runner;
pub mod workload;

pub use metrics::{LatencySummary, RunMetrics};
pub use report::{emit_report, parse_csv, ReportFormat};
pub use runner::{run, BackendConfig, BackendKind, RunConfig, RunError};
pub use workload::{Dist, Workload, WorkloadConfig};
