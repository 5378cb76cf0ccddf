//! Corpora of duration-annotated utterances and their speaking-rate structure.
//!
//! A corpus is a flat list of [`UtteranceRecord`]s. Each record carries token
//! ids, per-token frame durations, a mel matrix with exactly `sum(durations)`
//! frames, and the derived speaking rate in seconds per token:
//!
//! ```text
//! SR = seconds(sum durations) / n_tokens
//! ```
//!
//! Everything downstream (factor grids, data selection, rate-conditioned
//! training) is expressed in this unit.

mod factors;
mod manifest;
mod select;
mod synthetic;
mod tokenizer;

pub use factors::{derive_sr_factors, FactorProvenance, SrFactorSet, PAPER_FACTORS};
pub use manifest::{load_corpus, read_mel_file, save_corpus, write_mel_file};
pub use select::{select_training_subset, SelectionKind, SelectionStrategy};
pub use synthetic::{generate_synthetic_corpus, harmonic_mel_pattern, DurationLaw, SyntheticCorpusSpec};
pub use tokenizer::{CharTokenizer, Tokenizer};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Token identifier as produced by a tokenizer.
pub type TokenId = u32;

/// Default histogram resolution for [`compute_sr_statistics`].
pub const DEFAULT_HISTOGRAM_BINS: usize = 50;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid utterance `{id}`: {reason}")]
    InvalidUtterance { id: String, reason: String },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("degenerate SR distribution: std/mean = {ratio:.6} leaves the k=4 low factor non-positive")]
    DegenerateDistribution { ratio: f64 },
    #[error("invalid selection strategy: {0}")]
    InvalidStrategy(String),
    #[error(
        "insufficient data for speaker `{speaker}`: pool holds {achievable_seconds:.3} s, budget is {budget_seconds:.3} s"
    )]
    InsufficientData {
        speaker: String,
        achievable_seconds: f64,
        budget_seconds: f64,
    },
    #[error("invalid synthetic corpus spec: {0}")]
    InvalidSpec(String),
    #[error("duplicate utterance id `{0}`")]
    DuplicateId(String),
    #[error("missing file for utterance `{id}`: {path}")]
    MissingFile { id: String, path: String },
    #[error("shape mismatch for utterance `{id}`: durations sum to {expected_frames} frames but mel has {actual_frames}")]
    ShapeMismatch {
        id: String,
        expected_frames: usize,
        actual_frames: usize,
    },
    #[error("malformed mel file {path}: {reason}")]
    MalformedMel { path: String, reason: String },
    #[error("malformed manifest line {line}: {reason}")]
    MalformedManifest { line: usize, reason: String },
    #[error("unknown character {0:?} for tokenizer")]
    UnknownCharacter(char),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Audio framing parameters shared by mel matrices and SR arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AudioFrameSpec {
    /// Samples per second.
    pub sample_rate: u32,
    /// Samples per mel frame.
    pub hop_length: u32,
    /// Mel channel count.
    pub n_mels: usize,
}

impl AudioFrameSpec {
    pub fn new(sample_rate: u32, hop_length: u32, n_mels: usize) -> Self {
        assert!(sample_rate > 0 && hop_length > 0 && n_mels > 0);
        Self {
            sample_rate,
            hop_length,
            n_mels,
        }
    }

    /// Duration in seconds of `n_frames` mel frames.
    pub fn seconds(&self, n_frames: usize) -> f64 {
        n_frames as f64 * self.hop_length as f64 / self.sample_rate as f64
    }

    /// Seconds covered by a single frame.
    pub fn seconds_per_frame(&self) -> f64 {
        self.hop_length as f64 / self.sample_rate as f64
    }
}

impl Default for AudioFrameSpec {
    /// 22050 Hz / hop 256 / 80 mels, matching common mel front-ends.
    fn default() -> Self {
        Self {
            sample_rate: 22050,
            hop_length: 256,
            n_mels: 80,
        }
    }
}

/// One training or evaluation item.
///
/// Invariants, enforced by [`UtteranceRecord::new`]:
/// - `tokens` is non-empty and `durations` has the same length,
/// - `mel` has exactly `sum(durations)` rows,
/// - `speaking_rate` equals [`compute_speaking_rate`] of the record.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceRecord {
    pub id: String,
    pub speaker_id: String,
    pub tokens: Vec<TokenId>,
    /// Ground-truth frame count per token (forced-aligner style).
    pub durations: Vec<u32>,
    /// Mel frames, row-major `sum(durations) x n_mels`.
    pub mel: Array2<f32>,
    /// Seconds per token, derived from `durations`.
    pub speaking_rate: f64,
}

impl UtteranceRecord {
    pub fn new(
        id: impl Into<String>,
        speaker_id: impl Into<String>,
        tokens: Vec<TokenId>,
        durations: Vec<u32>,
        mel: Array2<f32>,
        spec: &AudioFrameSpec,
    ) -> Result<Self, CorpusError> {
        let id = id.into();
        let speaker_id = speaker_id.into();
        if tokens.is_empty() {
            return Err(CorpusError::InvalidUtterance {
                id,
                reason: "empty token sequence".into(),
            });
        }
        if tokens.len() != durations.len() {
            return Err(CorpusError::InvalidUtterance {
                id,
                reason: format!(
                    "{} tokens but {} durations",
                    tokens.len(),
                    durations.len()
                ),
            });
        }
        let total: u64 = durations.iter().map(|&d| d as u64).sum();
        if total == 0 {
            return Err(CorpusError::InvalidUtterance {
                id,
                reason: "durations sum to zero".into(),
            });
        }
        if mel.nrows() != total as usize {
            return Err(CorpusError::ShapeMismatch {
                id,
                expected_frames: total as usize,
                actual_frames: mel.nrows(),
            });
        }
        if mel.ncols() != spec.n_mels {
            return Err(CorpusError::InvalidUtterance {
                id,
                reason: format!("mel has {} channels, spec says {}", mel.ncols(), spec.n_mels),
            });
        }
        let mut record = Self {
            id,
            speaker_id,
            tokens,
            durations,
            mel,
            speaking_rate: 0.0,
        };
        record.speaking_rate = compute_speaking_rate(&record, spec)?;
        Ok(record)
    }

    /// Total frame count, equal to the mel row count.
    pub fn total_frames(&self) -> usize {
        self.durations.iter().map(|&d| d as usize).sum()
    }

    /// Audio length in seconds under `spec`.
    pub fn seconds(&self, spec: &AudioFrameSpec) -> f64 {
        spec.seconds(self.total_frames())
    }
}

/// Seconds of audio per token (Eq.-style speaking rate).
pub fn compute_speaking_rate(
    record: &UtteranceRecord,
    spec: &AudioFrameSpec,
) -> Result<f64, CorpusError> {
    if record.tokens.is_empty() {
        return Err(CorpusError::InvalidUtterance {
            id: record.id.clone(),
            reason: "empty token sequence".into(),
        });
    }
    let total: u64 = record.durations.iter().map(|&d| d as u64).sum();
    if total == 0 {
        return Err(CorpusError::InvalidUtterance {
            id: record.id.clone(),
            reason: "durations sum to zero".into(),
        });
    }
    Ok(spec.seconds(total as usize) / record.tokens.len() as f64)
}

/// Histogram of speaking rates over `[min, max]`, inclusive-left bin edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrHistogram {
    /// `bins + 1` edges; the last bin is closed on the right.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

/// Population mean/std and histogram of a corpus' speaking rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrStatistics {
    /// Seconds per token.
    pub mean: f64,
    /// Population standard deviation, seconds per token.
    pub std: f64,
    pub count: usize,
    pub histogram: SrHistogram,
}

/// Mean, population std and a histogram with [`DEFAULT_HISTOGRAM_BINS`] bins.
pub fn compute_sr_statistics(corpus: &[UtteranceRecord]) -> Result<SrStatistics, CorpusError> {
    compute_sr_statistics_with_bins(corpus, DEFAULT_HISTOGRAM_BINS)
}

pub fn compute_sr_statistics_with_bins(
    corpus: &[UtteranceRecord],
    bins: usize,
) -> Result<SrStatistics, CorpusError> {
    let rates: Vec<f64> = corpus.iter().map(|r| r.speaking_rate).collect();
    sr_statistics_from_rates(&rates, bins)
}

pub(crate) fn sr_statistics_from_rates(
    rates: &[f64],
    bins: usize,
) -> Result<SrStatistics, CorpusError> {
    if rates.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    assert!(bins >= 1, "histogram needs at least one bin");
    // Welford accumulation; the two-pass oracle in tests checks it to 1e-9.
    let mut mean = 0.0f64;
    let mut m2 = 0.0f64;
    for (i, &x) in rates.iter().enumerate() {
        let delta = x - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (x - mean);
    }
    let std = (m2 / rates.len() as f64).sqrt();

    let min = rates.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = rates.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let edges: Vec<f64> = (0..=bins)
        .map(|i| min + (max - min) * i as f64 / bins as f64)
        .collect();
    let mut counts = vec![0u64; bins];
    let width = (max - min) / bins as f64;
    for &x in rates {
        let idx = if width > 0.0 {
            (((x - min) / width) as usize).min(bins - 1)
        } else {
            0
        };
        counts[idx] += 1;
    }

    Ok(SrStatistics {
        mean,
        std,
        count: rates.len(),
        histogram: SrHistogram { edges, counts },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    pub(crate) fn record_with(
        id: &str,
        speaker: &str,
        tokens: Vec<TokenId>,
        durations: Vec<u32>,
        spec: &AudioFrameSpec,
    ) -> UtteranceRecord {
        let frames: usize = durations.iter().map(|&d| d as usize).sum();
        let mel = Array2::<f32>::zeros((frames, spec.n_mels));
        UtteranceRecord::new(id, speaker, tokens, durations, mel, spec).unwrap()
    }

    #[test]
    fn speaking_rate_direct_arithmetic() {
        let spec = AudioFrameSpec::new(22050, 256, 4);
        let rec = record_with("u0", "s", vec![0; 20], vec![10; 20], &spec);
        // 20 tokens, 200 frames total.
        let sr = compute_speaking_rate(&rec, &spec).unwrap();
        let expected = 200.0 * 256.0 / 22050.0 / 20.0;
        assert!((sr - expected).abs() < 1e-15);
        assert!((sr - 0.11610).abs() < 5e-6);
    }

    #[test]
    fn speaking_rate_one_token_one_second() {
        // One token whose frames total exactly one second: 22050 / 256 is not
        // integral, so use a spec where it is.
        let spec = AudioFrameSpec::new(16000, 200, 2);
        let rec = record_with("u0", "s", vec![3], vec![80], &spec);
        assert_eq!(compute_speaking_rate(&rec, &spec).unwrap(), 1.0);
    }

    #[test]
    fn speaking_rate_rejects_empty_tokens() {
        let spec = AudioFrameSpec::default();
        let err = UtteranceRecord::new("u0", "s", vec![], vec![], Array2::zeros((0, 80)), &spec)
            .unwrap_err();
        assert!(matches!(err, CorpusError::InvalidUtterance { .. }));
    }

    #[test]
    fn record_rejects_mel_duration_mismatch() {
        let spec = AudioFrameSpec::new(22050, 256, 3);
        let err = UtteranceRecord::new(
            "u1",
            "s",
            vec![1, 2],
            vec![50, 49],
            Array2::zeros((100, 3)),
            &spec,
        )
        .unwrap_err();
        match err {
            CorpusError::ShapeMismatch {
                expected_frames,
                actual_frames,
                ..
            } => {
                assert_eq!(expected_frames, 99);
                assert_eq!(actual_frames, 100);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn statistics_trivial_cases() {
        let stats = sr_statistics_from_rates(&[1.0, 1.0, 1.0], 50).unwrap();
        assert_eq!(stats.mean, 1.0);
        assert_eq!(stats.std, 0.0);
        assert_eq!(stats.count, 3);

        let stats = sr_statistics_from_rates(&[0.8, 1.2], 50).unwrap();
        assert!((stats.mean - 1.0).abs() < 1e-15);
        assert!((stats.std - 0.2).abs() < 1e-15);
    }

    #[test]
    fn statistics_match_two_pass_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let rates: Vec<f64> = (0..1000).map(|_| rng.gen_range(0.05..0.25)).collect();

        // Independent two-pass computation.
        let mean_oracle = rates.iter().sum::<f64>() / rates.len() as f64;
        let var_oracle =
            rates.iter().map(|x| (x - mean_oracle).powi(2)).sum::<f64>() / rates.len() as f64;
        let std_oracle = var_oracle.sqrt();

        let stats = sr_statistics_from_rates(&rates, 50).unwrap();
        assert!((stats.mean - mean_oracle).abs() / mean_oracle.abs() < 1e-9);
        assert!((stats.std - std_oracle).abs() / std_oracle.abs() < 1e-9);
    }

    #[test]
    fn statistics_empty_corpus_errors() {
        assert!(matches!(
            sr_statistics_from_rates(&[], 50),
            Err(CorpusError::EmptyCorpus)
        ));
    }

    #[test]
    fn histogram_covers_range_and_counts_everything() {
        let rates: Vec<f64> = (0..100).map(|i| 0.1 + 0.001 * i as f64).collect();
        let stats = sr_statistics_from_rates(&rates, 10).unwrap();
        assert_eq!(stats.histogram.edges.len(), 11);
        assert_eq!(stats.histogram.counts.iter().sum::<u64>(), 100);
        assert!((stats.histogram.edges[0] - 0.1).abs() < 1e-12);
        assert!((stats.histogram.edges[10] - 0.199).abs() < 1e-12);
    }

    #[test]
    fn histogram_degenerate_single_value() {
        let stats = sr_statistics_from_rates(&[0.5; 7], 50).unwrap();
        assert_eq!(stats.histogram.counts[0], 7);
        assert_eq!(stats.histogram.counts.iter().sum::<u64>(), 7);
    }
}
