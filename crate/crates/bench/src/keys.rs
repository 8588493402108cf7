//! Key choosers for the workload generators.

use rand::Rng;
use rand_distr::{Distribution, Zipf};

use crate::workload::{Dist, WorkloadError};

/// Draws record indices in `[0, n)`.
#[derive(Debug, Clone, Copy)]
pub enum KeyChooser {
    Uniform { n: u64 },
    /// Rank `k` (0-based) has probability proportional to `1 / (k + 1)^theta`.
    Zipfian { n: u64, zipf: Zipf<f64> },
}

impl KeyChooser {
    pub fn new(dist: Dist, n: u64, theta: f64) -> Result<Self, WorkloadError> {
        if n == 0 {
            return Err(WorkloadError::Invalid("record count must be at least 1".into()));
        }
        match dist {
            Dist::Uniform => Ok(KeyChooser::Uniform { n }),
            Dist::Zipfian => {
                if !(theta > 0.0 && theta < 1.0) {
                    return Err(WorkloadError::Invalid(format!("theta {theta} outside (0, 1)")));
                }
                let zipf = Zipf::new(n as f64, theta)
                    .map_err(|e| WorkloadError::Invalid(format!("zipf: {e:?}")))?;
                Ok(KeyChooser::Zipfian { n, zipf })
            }
        }
    }

    pub fn n(&self) -> u64 {
        match self {
            KeyChooser::Uniform { n } | KeyChooser::Zipfian { n, .. } => *n,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        match self {
            KeyChooser::Uniform { n } => rng.random_range(0..*n),
            KeyChooser::Zipfian { n, zipf } => (zipf.sample(rng) as u64).clamp(1, *n) - 1,
        }
    }
}

/// Draws one zipfian rank in `[0, n)`.
pub fn zipf_sample<R: Rng + ?Sized>(n: u64, theta: f64, rng: &mut R) -> Result<u64, WorkloadError> {
    Ok(KeyChooser::new(Dist::Zipfian, n, theta)?.sample(rng))
}
