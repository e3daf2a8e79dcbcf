use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed one-dimensional abscissae in (0, 1) used to average over the
/// radius distribution.
///
/// The default is the centered rank-1 lattice `u_i = (i + 1/2) / N`. A
/// seeded variant replaces the 1/2 offset with a seed-derived value in
/// (0, 1); no wrap-around is applied, so points stay sorted and strictly
/// interior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QmcPoints {
    count: usize,
    seed: Option<u64>,
    values: Vec<f64>,
}

impl QmcPoints {
    /// Centered lattice with `count` points.
    pub fn centered(count: usize) -> Result<Self> {
        Self::build(count, None, 0.5)
    }

    /// Lattice shifted by an offset derived from `seed`.
    pub fn seeded(count: usize, seed: u64) -> Result<Self> {
        Self::build(count, Some(seed), seed_offset(seed))
    }

    fn build(count: usize, seed: Option<u64>, offset: f64) -> Result<Self> {
        if count == 0 {
            return Err(Error::Contract("QMC point count must be positive".into()));
        }
        let n = count as f64;
        let values = (0..count).map(|i| (i as f64 + offset) / n).collect();
        Ok(Self { count, seed, values })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// SplitMix64 finalizer mapped to an offset strictly inside (0, 1).
fn seed_offset(seed: u64) -> f64 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    ((z >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}
