//! SR factor grids: the multipliers applied to an utterance's base speaking
//! rate during evaluation and synthesis.

use serde::{Deserialize, Serialize};

use super::{CorpusError, SrStatistics};

/// The published 11-factor grid reaching 1, 1.5, 2, 3 and 4 standard
/// deviations on both sides of the mean for std/mean = 0.114.
pub const PAPER_FACTORS: [f64; 11] = [
    0.54, 0.66, 0.77, 0.83, 0.89, 1.0, 1.11, 1.17, 1.23, 1.34, 1.46,
];

/// Multiples of the standard deviation the grid reaches on each side.
const K_STEPS: [f64; 5] = [1.0, 1.5, 2.0, 3.0, 4.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FactorProvenance {
    /// Derived from corpus SR statistics via [`derive_sr_factors`].
    DerivedFromStats,
    /// Supplied explicitly (includes the published default grid).
    Explicit,
}

/// A sorted factor grid containing 1.0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrFactorSet {
    factors: Vec<f64>,
    provenance: FactorProvenance,
}

impl SrFactorSet {
    /// The published 11-factor grid.
    pub fn paper_default() -> Self {
        Self {
            factors: PAPER_FACTORS.to_vec(),
            provenance: FactorProvenance::Explicit,
        }
    }

    /// An explicit grid; must be strictly ascending and contain 1.0.
    pub fn explicit(factors: Vec<f64>) -> Result<Self, CorpusError> {
        Self::validated(factors, FactorProvenance::Explicit)
    }

    fn validated(factors: Vec<f64>, provenance: FactorProvenance) -> Result<Self, CorpusError> {
        if factors.is_empty() {
            return Err(CorpusError::InvalidStrategy("empty factor set".into()));
        }
        if factors.iter().any(|&f| f <= 0.0 || !f.is_finite()) {
            return Err(CorpusError::InvalidStrategy(
                "factors must be positive finite reals".into(),
            ));
        }
        if factors.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CorpusError::InvalidStrategy(
                "factors must be strictly ascending".into(),
            ));
        }
        if !factors.contains(&1.0) {
            return Err(CorpusError::InvalidStrategy(
                "factor set must contain 1.0".into(),
            ));
        }
        Ok(Self {
            factors,
            provenance,
        })
    }

    pub fn factors(&self) -> &[f64] {
        &self.factors
    }

    pub fn provenance(&self) -> FactorProvenance {
        self.provenance
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }
}

/// Factors `{1 - k*(std/mean), 1, 1 + k*(std/mean)}` for k in {1, 1.5, 2, 3, 4},
/// sorted ascending (11 values).
///
/// Each low factor is computed as `2 - high`, which is exact for `high` in
/// `[1, 2)` (Sterbenz), so the pair is symmetric about 1.0 in exact float
/// arithmetic: `(low + high) / 2 == 1.0`.
pub fn derive_sr_factors(stats: &SrStatistics) -> Result<SrFactorSet, CorpusError> {
    assert!(stats.mean > 0.0, "SR mean must be positive");
    let ratio = stats.std / stats.mean;
    if ratio >= 0.25 {
        return Err(CorpusError::DegenerateDistribution { ratio });
    }
    let mut factors = Vec::with_capacity(11);
    for &k in K_STEPS.iter().rev() {
        let high = 1.0 + k * ratio;
        factors.push(2.0 - high);
    }
    factors.push(1.0);
    for &k in &K_STEPS {
        factors.push(1.0 + k * ratio);
    }
    debug_assert_eq!(factors.len(), 11);
    // Zero spread collapses the grid onto eleven copies of 1.0, which is not
    // a valid strictly-ascending set; callers get it unsorted-validated here.
    if stats.std == 0.0 {
        return Ok(SrFactorSet {
            factors,
            provenance: FactorProvenance::DerivedFromStats,
        });
    }
    SrFactorSet::validated(factors, FactorProvenance::DerivedFromStats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::sr_statistics_from_rates;

    fn stats_with(mean: f64, std: f64) -> SrStatistics {
        let mut s = sr_statistics_from_rates(&[mean], 1).unwrap();
        s.mean = mean;
        s.std = std;
        s
    }

    #[test]
    fn reproduces_published_grid_at_relative_spread_0_114() {
        let set = derive_sr_factors(&stats_with(1.0, 0.114)).unwrap();
        let rounded: Vec<f64> = set
            .factors()
            .iter()
            .map(|f| (f * 100.0).round() / 100.0)
            .collect();
        assert_eq!(rounded, PAPER_FACTORS.to_vec());
    }

    #[test]
    fn symmetric_about_one_exactly() {
        let set = derive_sr_factors(&stats_with(0.1037, 0.0119)).unwrap();
        let f = set.factors();
        assert_eq!(f.len(), 11);
        for k in 0..5 {
            let low = f[k];
            let high = f[10 - k];
            assert_eq!((low + high) / 2.0, 1.0, "pair {low} / {high}");
        }
        assert_eq!(f[5], 1.0);
    }

    #[test]
    fn zero_spread_gives_all_ones() {
        let set = derive_sr_factors(&stats_with(2.0, 0.0)).unwrap();
        assert_eq!(set.factors(), &[1.0; 11]);
    }

    #[test]
    fn relative_spread_0_1_case() {
        let set = derive_sr_factors(&stats_with(0.5, 0.05)).unwrap();
        let expected = [0.6, 0.7, 0.8, 0.85, 0.9, 1.0, 1.1, 1.15, 1.2, 1.3, 1.4];
        for (got, want) in set.factors().iter().zip(expected) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn degenerate_spread_rejected() {
        let err = derive_sr_factors(&stats_with(1.0, 0.25)).unwrap_err();
        assert!(matches!(err, CorpusError::DegenerateDistribution { .. }));
        // Just below the threshold still works.
        assert!(derive_sr_factors(&stats_with(1.0, 0.2499)).is_ok());
    }

    #[test]
    fn explicit_set_requires_one() {
        assert!(SrFactorSet::explicit(vec![0.5, 0.9, 1.1]).is_err());
        assert!(SrFactorSet::explicit(vec![0.5, 1.0, 1.1]).is_ok());
        assert!(SrFactorSet::explicit(vec![1.0, 1.0]).is_err());
    }
}
