//! Workload definitions.

use std::fmt;
use std::time::Duration;

use clap::ValueEnum;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum WorkloadError {
    #[error("invalid workload: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Workload {
    #[value(name = "ycsb_a")]
    YcsbA,
    #[value(name = "ycsb_b")]
    YcsbB,
    /// Cross-log dependency stressor: operations read handoff records last
    /// written by other log groups.
    #[value(name = "dep_stress")]
    DepStress,
}

impl Workload {
    pub fn name(self) -> &'static str {
        match self {
            Workload::YcsbA => "ycsb_a",
            Workload::YcsbB => "ycsb_b",
            Workload::DepStress => "dep_stress",
        }
    }

    pub fn default_read_fraction(self) -> f64 {
        match self {
            Workload::YcsbB => 0.95,
            Workload::YcsbA | Workload::DepStress => 0.5,
        }
    }
}

impl fmt::Display for Workload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Dist {
    Uniform,
    Zipfian,
}

impl Dist {
    pub fn name(self) -> &'static str {
        match self {
            Dist::Uniform => "uniform",
            Dist::Zipfian => "zipfian",
        }
    }
}

impl fmt::Display for Dist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Fields per record, each 8 bytes.
pub const FIELDS: usize = 10;
pub const FIELD_BYTES: usize = 8;
/// Share of dep_stress operations that read another group's handoff record.
pub const HANDOFF_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadConfig {
    pub workload: Workload,
    pub record_count: u64,
    pub ops_per_txn: usize,
    pub dist: Dist,
    pub theta: f64,
    pub read_fraction: f64,
    pub worker_threads: usize,
    pub duration: Duration,
    pub seed: u64,
    /// Stop after this many transaction attempts in total.
    pub txn_budget: Option<u64>,
}

impl WorkloadConfig {
    pub fn new(workload: Workload) -> Self {
        WorkloadConfig {
            workload,
            record_count: 1_000_000,
            ops_per_txn: 10,
            dist: Dist::Uniform,
            theta: 0.99,
            read_fraction: workload.default_read_fraction(),
            worker_threads: 8,
            duration: Duration::from_secs(10),
            seed: 1,
            txn_budget: None,
        }
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: String| Err(WorkloadError::Invalid(m));
        if !(0.0..=1.0).contains(&self.read_fraction) {
            return bad(format!("read_fraction {} outside [0, 1]", self.read_fraction));
        }
        if self.dist == Dist::Zipfian && !(self.theta > 0.0 && self.theta < 1.0) {
            return bad(format!("theta {} outside (0, 1)", self.theta));
        }
        if self.record_count == 0 {
            return bad("record_count must be at least 1".into());
        }
        if self.ops_per_txn == 0 {
            return bad("ops_per_txn must be at least 1".into());
        }
        if self.worker_threads == 0 {
            return bad("worker_threads must be at least 1".into());
        }
        Ok(())
    }
}
