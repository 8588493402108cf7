//! Request-size to latency model for simulated object storage.
//!
//! Each operation kind follows a piecewise-linear curve: a flat latency up to a
//! size threshold, then a constant slope per extra byte. A sample multiplies the
//! curve by a lognormal jitter draw and, with small probability, by a tail-spike
//! factor.

use std::time::Duration;

use rand::Rng;
use rand_distr::{Distribution, LogNormal};

const KIB: u64 = 1024;
const MIB: u64 = 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Get,
    Append,
    Put,
    Delete,
    List,
}

/// Flat-then-linear latency curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyCurve {
    pub flat_latency: Duration,
    pub flat_threshold: u64,
    /// Extra nanoseconds per byte beyond `flat_threshold`.
    pub slope_ns_per_byte: f64,
}

impl LatencyCurve {
    pub fn flat(latency: Duration) -> Self {
        LatencyCurve {
            flat_latency: latency,
            flat_threshold: u64::MAX,
            slope_ns_per_byte: 0.0,
        }
    }

    pub fn at(&self, size: u64) -> Duration {
        if size <= self.flat_threshold {
            return self.flat_latency;
        }
        let extra = (size - self.flat_threshold) as f64 * self.slope_ns_per_byte;
        self.flat_latency + Duration::from_nanos(extra.round() as u64)
    }
}

/// Probability and multiplier of an occasional slow request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailSpike {
    pub probability: f64,
    pub multiplier: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// S3 Express One Zone: appends supported, single-digit ms at small sizes.
    Express,
    /// S3 Standard: no appends, every write is a whole-object put.
    Standard,
}

impl std::str::FromStr for Profile {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "express" => Ok(Profile::Express),
            "standard" => Ok(Profile::Standard),
            other => Err(format!("unknown backend profile '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyModel {
    pub get: LatencyCurve,
    pub append: LatencyCurve,
    pub put: LatencyCurve,
    /// Latency of metadata requests (delete, list).
    pub metadata: LatencyCurve,
    /// Sigma of the multiplicative lognormal jitter; `0` disables jitter.
    pub jitter_sigma: f64,
    pub tail_spike: Option<TailSpike>,
    pub supports_append: bool,
}

impl LatencyModel {
    /// S3 Express One Zone. Appends are flat at 8 ms up to 512 KiB and grow by
    /// 14 ms per extra 1.5 MiB, reaching 22 ms at 2 MiB. Gets are flat at 5 ms up
    /// to 1 MiB and grow at the same slope beyond.
    pub fn express() -> Self {
        let slope = 14.0e6 / (1.5 * MIB as f64);
        let append = LatencyCurve {
            flat_latency: Duration::from_millis(8),
            flat_threshold: 512 * KIB,
            slope_ns_per_byte: slope,
        };
        LatencyModel {
            get: LatencyCurve {
                flat_latency: Duration::from_millis(5),
                flat_threshold: MIB,
                slope_ns_per_byte: slope,
            },
            append,
            put: append,
            metadata: LatencyCurve::flat(Duration::from_millis(5)),
            jitter_sigma: 0.25,
            tail_spike: Some(TailSpike {
                probability: 0.005,
                multiplier: 5.0,
            }),
            supports_append: true,
        }
    }

    /// S3 Standard. Puts are flat at 25 ms up to 512 KiB and reach 77 ms at
    /// 2 MiB.
    pub fn standard() -> Self {
        let slope = 52.0e6 / (1.5 * MIB as f64);
        let put = LatencyCurve {
            flat_latency: Duration::from_millis(25),
            flat_threshold: 512 * KIB,
            slope_ns_per_byte: slope,
        };
        LatencyModel {
            get: LatencyCurve {
                flat_latency: Duration::from_millis(20),
                flat_threshold: 512 * KIB,
                slope_ns_per_byte: slope,
            },
            append: put,
            put,
            metadata: LatencyCurve::flat(Duration::from_millis(20)),
            jitter_sigma: 0.25,
            tail_spike: Some(TailSpike {
                probability: 0.005,
                multiplier: 5.0,
            }),
            supports_append: false,
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Express => Self::express(),
            Profile::Standard => Self::standard(),
        }
    }

    /// Zero latency for every request; useful for functional tests.
    pub fn instant() -> Self {
        let zero = LatencyCurve::flat(Duration::ZERO);
        LatencyModel {
            get: zero,
            append: zero,
            put: zero,
            metadata: zero,
            jitter_sigma: 0.0,
            tail_spike: None,
            supports_append: true,
        }
    }

    /// The same curves with jitter and tail spikes removed.
    pub fn without_jitter(mut self) -> Self {
        self.jitter_sigma = 0.0;
        self.tail_spike = None;
        self
    }

    pub fn curve(&self, op: OpKind) -> &LatencyCurve {
        match op {
            OpKind::Get => &self.get,
            OpKind::Append => &self.append,
            OpKind::Put => &self.put,
            OpKind::Delete | OpKind::List => &self.metadata,
        }
    }

    /// The curve value with no randomness applied.
    pub fn deterministic(&self, op: OpKind, size: u64) -> Duration {
        self.curve(op).at(size)
    }

    /// Draws one latency for a request of `size` bytes.
    pub fn sample<R: Rng + ?Sized>(&self, op: OpKind, size: u64, rng: &mut R) -> Duration {
        let base = self.deterministic(op, size);
        let mut factor = 1.0;
        if self.jitter_sigma > 0.0 {
            // sigma was validated positive, so construction cannot fail
            let jitter = LogNormal::new(0.0, self.jitter_sigma).expect("positive sigma");
            factor *= jitter.sample(rng);
        }
        if let Some(spike) = self.tail_spike {
            if spike.probability > 0.0 && rng.random_bool(spike.probability.min(1.0)) {
                factor *= spike.multiplier;
            }
        }
        if factor == 1.0 {
            return base;
        }
        Duration::from_secs_f64(base.as_secs_f64() * factor)
    }
}
