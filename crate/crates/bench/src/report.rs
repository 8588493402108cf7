//! CSV and human-readable reports.

use std::fmt::Write as _;
use std::time::Duration;

use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use crate::metrics::RunMetrics;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Human,
    Csv,
}

/// One CSV row. Latencies are in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub variant: String,
    pub workload: String,
    pub dist: String,
    pub threads: usize,
    pub group_size: usize,
    pub buffer_bytes: usize,
    pub tracking: String,
    pub throughput: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub p999: f64,
    pub p9999: f64,
    pub appends: u64,
    pub bytes: u64,
    pub cost_usd: f64,
}

pub const CSV_COLUMNS: [&str; 16] = [
    "variant",
    "workload",
    "dist",
    "threads",
    "group_size",
    "buffer_bytes",
    "tracking",
    "throughput",
    "p50",
    "p90",
    "p99",
    "p999",
    "p9999",
    "appends",
    "bytes",
    "cost_usd",
];

fn ms(d: Duration) -> f64 {
    d.as_nanos() as f64 / 1e6
}

impl From<&RunMetrics> for CsvRow {
    fn from(m: &RunMetrics) -> Self {
        let l = &m.latency;
        CsvRow {
            variant: m.variant.clone(),
            workload: m.workload.clone(),
            dist: m.dist.clone(),
            threads: m.threads,
            group_size: m.group_size,
            buffer_bytes: m.buffer_bytes,
            tracking: m.tracking.clone(),
            throughput: m.throughput,
            p50: ms(l.p50),
            p90: ms(l.p90),
            p99: ms(l.p99),
            p999: ms(l.p999),
            p9999: ms(l.p9999),
            appends: m.appends,
            bytes: m.bytes,
            cost_usd: m.cost_usd,
        }
    }
}

pub fn emit_csv(runs: &[RunMetrics]) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    // written by hand so an empty report still has its header
    w.write_record(CSV_COLUMNS).expect("in-memory write");
    for m in runs {
        w.serialize(CsvRow::from(m)).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
}

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>, csv::Error> {
    csv::Reader::from_reader(text.as_bytes()).deserialize().collect()
}

pub fn emit_human(runs: &[RunMetrics]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<24} {:>12} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9} {:>10} {:>9}",
        "variant", "txn/s", "avg ms", "p50", "p90", "p99", "p99.9", "p99.99", "appends", "cost $"
    );
    for m in runs {
        let l = &m.latency;
        let _ = writeln!(
            out,
            "{:<24} {:>12.1} {:>9.3} {:>9.3} {:>9.3} {:>9.3} {:>9.3} {:>9.3} {:>10} {:>9.4}",
            m.variant,
            m.throughput,
            ms(l.mean),
            ms(l.p50),
            ms(l.p90),
            ms(l.p99),
            ms(l.p999),
            ms(l.p9999),
            m.appends,
            m.cost_usd
        );
        let _ = writeln!(
            out,
            "  {} {} threads={} group={} buffer={} tracking={} committed={} aborted={} bytes={}{}",
            m.workload,
            m.dist,
            m.threads,
            m.group_size,
            m.buffer_bytes,
            m.tracking,
            m.committed,
            m.aborted,
            m.bytes,
            match (&m.valid, &m.error) {
                (true, _) => String::new(),
                (false, Some(e)) => format!(" INVALID: {e}"),
                (false, None) => " INVALID".to_string(),
            }
        );
    }
    out
}

pub fn emit_report(runs: &[RunMetrics], format: ReportFormat) -> String {
    match format {
        ReportFormat::Human => emit_human(runs),
        ReportFormat::Csv => emit_csv(runs),
    }
}
