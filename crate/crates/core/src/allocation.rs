//! Counterfactual allocation programs: probabilities of allocation vectors,
//! exhaustive enumeration, and seeded sampling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;
use rand::Rng;

pub const DEFAULT_ENUMERATION_CAP: usize = 20;

/// A treatment allocation program applied to the members of an interference
/// set other than the unit held fixed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AllocationStrategy {
    /// Each unit treated independently with probability `alpha`.
    IndependentBernoulli { alpha: f64 },
}

impl AllocationStrategy {
    pub fn bernoulli(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidAlpha(alpha));
        }
        Ok(Self::IndependentBernoulli { alpha })
    }

    pub fn alpha(&self) -> f64 {
        match *self {
            Self::IndependentBernoulli { alpha } => alpha,
        }
    }

    /// `π(s | A_i = a; α)`. Under independence the conditioning on the fixed
    /// unit's level is vacuous.
    pub fn pi_conditional(&self, s: &AllocationVector, _fixed_level: bool) -> f64 {
        match *self {
            Self::IndependentBernoulli { alpha } => s.bits.iter().map(|&b| if b { alpha } else { 1.0 - alpha }).product(),
        }
    }

    /// Probability of the allocation encoded in the low `n` bits of `mask`.
    pub fn pi_mask(&self, mask: u64, n: usize) -> f64 {
        match *self {
            Self::IndependentBernoulli { alpha } => {
                (0..n).map(|k| if (mask >> k) & 1 == 1 { alpha } else { 1.0 - alpha }).product()
            }
        }
    }

    /// Natural log of `π` for an allocation given as booleans; `-inf` when
    /// the allocation is impossible under the program.
    pub fn log_pi(&self, bits: impl Iterator<Item = bool>) -> f64 {
        match *self {
            Self::IndependentBernoulli { alpha } => bits.map(|b| if b { alpha.ln() } else { (1.0 - alpha).ln() }).sum(),
        }
    }

    pub fn sample_bits<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<bool> {
        match *self {
            Self::IndependentBernoulli { alpha } => (0..n).map(|_| rng.random::<f64>() < alpha).collect(),
        }
    }
}

/// A binary allocation over an ordered index set.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AllocationVector {
    pub bits: Vec<bool>,
}

impl AllocationVector {
    pub fn from_mask(mask: u64, n: usize) -> Self {
        Self {
            bits: (0..n).map(|k| (mask >> k) & 1 == 1).collect(),
        }
    }

    /// Integer encoding, bit `k` = entry `k`. Requires `len <= 64`.
    pub fn mask(&self) -> u64 {
        debug_assert!(self.bits.len() <= 64);
        self.bits.iter().enumerate().fold(0, |m, (k, &b)| m | (u64::from(b) << k))
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn n_treated(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

pub fn check_enumerable(n: usize, cap: usize) -> Result<()> {
    if n > cap || n >= 64 {
        return Err(Error::EnumerationCapExceeded { n, cap });
    }
    Ok(())
}

/// All `2^n` allocations, ordered by integer encoding (entry 0 least significant).
pub fn enumerate_allocations(n: usize, cap: usize) -> Result<Vec<AllocationVector>> {
    check_enumerable(n, cap)?;
    Ok((0..1u64 << n).map(|m| AllocationVector::from_mask(m, n)).collect())
}

/// `count` allocations of length `n`, replicate `r` drawn from substream
/// `(seed, r)`.
pub fn sample_allocations(n: usize, strategy: &AllocationStrategy, count: usize, seed: u64) -> Vec<AllocationVector> {
    (0..count as u64)
        .map(|r| {
            let mut rng = substream(seed, 0, r);
            AllocationVector {
                bits: strategy.sample_bits(n, &mut rng),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn av(bits: &[u8]) -> AllocationVector {
        AllocationVector {
            bits: bits.iter().map(|&b| b == 1).collect(),
        }
    }

    #[test]
    fn bernoulli_products() {
        let s = AllocationStrategy::bernoulli(0.3).unwrap();
        assert!((s.pi_conditional(&av(&[1, 0, 1]), true) - 0.063).abs() < 1e-15);
        let zero = AllocationStrategy::bernoulli(0.0).unwrap();
        assert_eq!(zero.pi_conditional(&av(&[0, 0]), false), 1.0);
        assert_eq!(zero.pi_conditional(&av(&[1, 0]), false), 0.0);
        assert_eq!(s.pi_conditional(&av(&[]), false), 1.0);
        assert!(AllocationStrategy::bernoulli(1.5).is_err());
        assert!(AllocationStrategy::bernoulli(f64::NAN).is_err());
    }

    #[test]
    fn enumeration_order() {
        let all = enumerate_allocations(2, 20).unwrap();
        assert_eq!(all, vec![av(&[0, 0]), av(&[1, 0]), av(&[0, 1]), av(&[1, 1])]);
        assert_eq!(enumerate_allocations(0, 20).unwrap(), vec![av(&[])]);
        assert_eq!(
            enumerate_allocations(21, 20),
            Err(Error::EnumerationCapExceeded { n: 21, cap: 20 })
        );
        assert_eq!(all[3].mask(), 3);
    }

    #[test]
    fn total_probability_and_expected_count() {
        let s = AllocationStrategy::bernoulli(0.37).unwrap();
        let total: f64 = enumerate_allocations(5, 20).unwrap().iter().map(|v| s.pi_conditional(v, true)).sum();
        assert!((total - 1.0).abs() < 1e-12);
        for alpha in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let s = AllocationStrategy::bernoulli(alpha).unwrap();
            for n in 0..=12 {
                let all = enumerate_allocations(n, 20).unwrap();
                let total: f64 = all.iter().map(|v| s.pi_conditional(v, false)).sum();
                assert!((total - 1.0).abs() < 1e-12);
                let mean: f64 = all.iter().map(|v| v.n_treated() as f64 * s.pi_conditional(v, false)).sum();
                assert!((mean - n as f64 * alpha).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sampling_contracts() {
        let one = AllocationStrategy::bernoulli(1.0).unwrap();
        assert!(sample_allocations(6, &one, 20, 3).iter().all(|v| v.n_treated() == 6));
        let half = AllocationStrategy::bernoulli(0.5).unwrap();
        assert_eq!(sample_allocations(10, &half, 50, 9), sample_allocations(10, &half, 50, 9));
        assert_ne!(sample_allocations(10, &half, 50, 9), sample_allocations(10, &half, 50, 10));
    }

    #[test]
    fn sampled_bit_means_are_within_four_standard_errors() {
        let r = 100_000;
        let half = AllocationStrategy::bernoulli(0.5).unwrap();
        let draws = sample_allocations(10, &half, r, 2024);
        let se = (0.25 / r as f64).sqrt();
        assert!((4.0 * se - 0.0063).abs() < 1e-4);
        for k in 0..10 {
            let mean = draws.iter().filter(|v| v.bits[k]).count() as f64 / r as f64;
            assert!((mean - 0.5).abs() < 4.0 * se, "bit {k}: {mean}");
        }
    }

    #[test]
    fn mask_helpers_agree() {
        let s = AllocationStrategy::bernoulli(0.2).unwrap();
        for v in enumerate_allocations(4, 20).unwrap() {
            assert_eq!(s.pi_mask(v.mask(), 4), s.pi_conditional(&v, false));
            assert!((s.log_pi(v.bits.iter().copied()).exp() - s.pi_mask(v.mask(), 4)).abs() < 1e-15);
        }
    }
}
