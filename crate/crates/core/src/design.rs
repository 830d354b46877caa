//! Bernoulli treatment assignment and replication random streams.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifier of the generator family recorded in every report.
pub const RNG_ID: &str = "chacha20-rand_chacha-0.9-stream";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DesignError {
    #[error("treatment probability r1 = {0} must lie strictly inside (0, 1)")]
    InvalidProbability(f64),
}

/// Bernoulli(r1) design.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Design {
    r1: f64,
}

impl Design {
    pub fn new(r1: f64) -> Result<Self, DesignError> {
        if r1.is_finite() && r1 > 0.0 && r1 < 1.0 {
            Ok(Design { r1 })
        } else {
            Err(DesignError::InvalidProbability(r1))
        }
    }

    #[inline]
    pub fn r1(&self) -> f64 {
        self.r1
    }

    #[inline]
    pub fn r0(&self) -> f64 {
        1.0 - self.r1
    }

    /// `P(Z = z)` for an assignment with `treated` ones among `n` units.
    pub fn probability(&self, treated: usize, n: usize) -> f64 {
        self.r1.powi(treated as i32) * self.r0().powi((n - treated) as i32)
    }
}

impl TryFrom<f64> for Design {
    type Error = DesignError;
    fn try_from(r1: f64) -> Result<Self, Self::Error> {
        Design::new(r1)
    }
}

impl From<Design> for f64 {
    fn from(d: Design) -> f64 {
        d.r1
    }
}

/// Binary treatment vector `Z`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Assignment {
    z: Vec<bool>,
}

impl Assignment {
    pub fn new(z: Vec<bool>) -> Self {
        Assignment { z }
    }

    pub fn from_bits(z: &[u8]) -> Self {
        Assignment {
            z: z.iter().map(|&b| b != 0).collect(),
        }
    }

    pub fn all(n: usize, treated: bool) -> Self {
        Assignment {
            z: vec![treated; n],
        }
    }

    /// Assignment with only unit `i` treated.
    pub fn unit(n: usize, i: usize) -> Self {
        let mut z = vec![false; n];
        z[i] = true;
        Assignment { z }
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    #[inline]
    pub fn is_treated(&self, i: usize) -> bool {
        self.z[i]
    }

    #[inline]
    pub fn value(&self, i: usize) -> f64 {
        if self.z[i] {
            1.0
        } else {
            0.0
        }
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.z
    }

    pub fn treated_count(&self) -> usize {
        self.z.iter().filter(|&&t| t).count()
    }

    pub(crate) fn flip(&mut self, i: usize) {
        self.z[i] = !self.z[i];
    }
}

/// Random stream for replication `index` under `master_seed`.
///
/// Streams are ChaCha20 key/stream pairs: the key derives from the master
/// seed and the 64-bit stream id is the replication index, so any
/// replication can be regenerated without touching the others.
pub fn replication_stream(master_seed: u64, index: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}

/// `n` independent Bernoulli(r1) draws.
pub fn draw_assignment<R: Rng + ?Sized>(design: &Design, n: usize, rng: &mut R) -> Assignment {
    let z = (0..n).map(|_| rng.random::<f64>() < design.r1).collect();
    Assignment { z }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_degenerate_probabilities() {
        assert!(Design::new(0.0).is_err());
        assert!(Design::new(1.0).is_err());
        assert!(Design::new(f64::NAN).is_err());
        let d = Design::new(0.3).unwrap();
        assert!((d.r0() + d.r1() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let d = Design::new(0.5).unwrap();
        let a = draw_assignment(&d, 200, &mut replication_stream(7, 3));
        let b = draw_assignment(&d, 200, &mut replication_stream(7, 3));
        assert_eq!(a, b);
    }

    #[test]
    fn distinct_streams_differ() {
        let d = Design::new(0.5).unwrap();
        let a = draw_assignment(&d, 256, &mut replication_stream(7, 1));
        let b = draw_assignment(&d, 256, &mut replication_stream(7, 2));
        assert_ne!(a, b);
    }

    #[test]
    fn treated_fraction_large_n() {
        // Hoeffding: P(|p̂ - 0.5| > 0.01) <= 2 exp(-2 * 1e5 * 1e-4) = 2e-9.
        let d = Design::new(0.5).unwrap();
        let z = draw_assignment(&d, 100_000, &mut replication_stream(2024, 0));
        let frac = z.treated_count() as f64 / 1e5;
        assert!((frac - 0.5).abs() < 0.01, "{frac}");
    }

    #[test]
    fn treated_fraction_over_replications() {
        let d = Design::new(0.5).unwrap();
        let total: usize = (0..10_000u64)
            .map(|r| draw_assignment(&d, 100, &mut replication_stream(99, r)).treated_count())
            .sum();
        let frac = total as f64 / 1e6;
        assert!((frac - 0.5).abs() < 0.005, "{frac}");
    }

    #[test]
    fn probability_of_assignment() {
        let d = Design::new(0.25).unwrap();
        assert!((d.probability(1, 2) - 0.25 * 0.75).abs() < 1e-15);
    }
}
