//! Run metrics and exact latency percentiles.

use std::time::Duration;

/// Nearest-rank percentile of an ascending slice: the smallest sample with at
/// least `q * n` samples at or below it. `None` for an empty slice.
pub fn percentile(sorted: &[Duration], q: f64) -> Option<Duration> {
    if sorted.is_empty() {
        return None;
    }
    let n = sorted.len();
    let rank = (q * n as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, n) - 1])
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LatencySummary {
    pub count: u64,
    pub mean: Duration,
    pub p50: Duration,
    pub p90: Duration,
    pub p99: Duration,
    pub p999: Duration,
    pub p9999: Duration,
    pub max: Duration,
}

impl LatencySummary {
    /// Summarizes commit latencies; all zero when `samples` is empty.
    pub fn from_samples(mut samples: Vec<Duration>) -> Self {
        if samples.is_empty() {
            return LatencySummary::default();
        }
        samples.sort_unstable();
        let total: u128 = samples.iter().map(Duration::as_nanos).sum();
        let at = |q| percentile(&samples, q).unwrap_or_default();
        LatencySummary {
            count: samples.len() as u64,
            mean: Duration::from_nanos((total / samples.len() as u128) as u64),
            p50: at(0.5),
            p90: at(0.9),
            p99: at(0.99),
            p999: at(0.999),
            p9999: at(0.9999),
            max: *samples.last().unwrap_or(&Duration::ZERO),
        }
    }

    pub fn percentiles(&self) -> [Duration; 5] {
        [self.p50, self.p90, self.p99, self.p999, self.p9999]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub variant: String,
    pub workload: String,
    pub dist: String,
    pub threads: usize,
    pub group_size: usize,
    pub buffer_bytes: usize,
    pub tracking: String,
    pub committed: u64,
    /// Attempts that hit a write conflict and were retried.
    pub aborted: u64,
    /// Committed transactions that wrote nothing.
    pub read_only: u64,
    pub elapsed: Duration,
    /// Committed transactions per second.
    pub throughput: f64,
    /// Enqueue to release, one sample per released transaction.
    pub latency: LatencySummary,
    pub appends: u64,
    pub bytes: u64,
    /// Bytes of log entries handed to the log buffers.
    pub entry_bytes: u64,
    pub cost_usd: f64,
    /// False when the backend failed during the run.
    pub valid: bool,
    pub error: Option<String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ms(v: u64) -> Duration {
        Duration::from_millis(v)
    }

    #[test]
    fn nearest_rank() {
        let s: Vec<Duration> = (1..=10).map(ms).collect();
        assert_eq!(percentile(&s, 0.5), Some(ms(5)));
        assert_eq!(percentile(&s, 0.9), Some(ms(9)));
        assert_eq!(percentile(&s, 0.99), Some(ms(10)));
        assert_eq!(percentile(&s, 0.0), Some(ms(1)));
        assert_eq!(percentile(&[], 0.5), None);
    }

    #[test]
    fn empty_summary_is_zero() {
        assert_eq!(LatencySummary::from_samples(vec![]), LatencySummary::default());
    }

    proptest! {
        #[test]
        fn matches_sorted_reference(raw in proptest::collection::vec(0u64..1_000_000, 1..400)) {
            let samples: Vec<Duration> = raw.iter().map(|&n| Duration::from_nanos(n)).collect();
            let s = LatencySummary::from_samples(samples.clone());
            let mut sorted = raw.clone();
            sorted.sort();
            for (q, got) in [0.5, 0.9, 0.99, 0.999, 0.9999].iter().zip(s.percentiles()) {
                // reference: count samples until the cumulative share reaches q
                let mut want = sorted[sorted.len() - 1];
                for (i, &v) in sorted.iter().enumerate() {
                    if (i + 1) as f64 >= q * sorted.len() as f64 {
                        want = v;
                        break;
                    }
                }
                prop_assert_eq!(got, Duration::from_nanos(want));
            }
            prop_assert!(s.percentiles().windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(s.max, Duration::from_nanos(sorted[sorted.len() - 1]));
        }
    }
}
