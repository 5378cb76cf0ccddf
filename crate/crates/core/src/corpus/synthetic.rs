//! Seeded synthetic corpora with a known token-level duration law.
//!
//! Each token `t` owns a base duration and an exponent `gamma[t]`; at latent
//! speaking rate `s` its duration is
//!
//! ```text
//! d(t, s) = max(1, round(base[t] * (s / mu_ref)^gamma[t]))
//! ```
//!
//! so token durations respond non-uniformly to rate changes whenever the
//! exponents differ. The recorded speaking rate of every generated utterance
//! is recomputed from the rounded durations, which keeps the corpus
//! self-consistent: conditioning on a recorded SR value is exactly the total
//! duration it implies.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AudioFrameSpec, CorpusError, UtteranceRecord};

/// Full description of a synthetic corpus, including the per-token law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpusSpec {
    pub vocab_size: usize,
    pub n_utterances: usize,
    /// Inclusive token-count range per utterance.
    pub token_len_range: (usize, usize),
    /// Base duration in frames per token id (length `vocab_size`).
    pub base_duration: Vec<f64>,
    /// Rate exponent per token id (length `vocab_size`).
    pub gamma: Vec<f64>,
    /// Latent speaking-rate range in seconds per token (uniform draw).
    pub sr_range: (f64, f64),
    /// Reference rate for the power law; durations equal `base_duration`
    /// exactly when the latent rate equals it.
    pub mu_ref: f64,
    /// Mel template per token id (each of length `frame_spec.n_mels`).
    pub mel_patterns: Vec<Vec<f32>>,
    /// Half-width of the uniform noise added to every mel entry.
    pub mel_noise: f32,
    pub n_speakers: usize,
    pub frame_spec: AudioFrameSpec,
    pub seed: u64,
}

impl SyntheticCorpusSpec {
    /// Draw per-token base durations, exponents and mel templates from the
    /// given ranges, seeded independently of the utterance stream.
    #[allow(clippy::too_many_arguments)]
    pub fn with_random_law(
        vocab_size: usize,
        n_utterances: usize,
        token_len_range: (usize, usize),
        base_duration_range: (f64, f64),
        gamma_range: (f64, f64),
        sr_range: (f64, f64),
        frame_spec: AudioFrameSpec,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15));
        let base_duration: Vec<f64> = (0..vocab_size)
            .map(|_| rng.gen_range(base_duration_range.0..=base_duration_range.1))
            .collect();
        let gamma: Vec<f64> = (0..vocab_size)
            .map(|_| rng.gen_range(gamma_range.0..=gamma_range.1))
            .collect();
        let n_mels = frame_spec.n_mels;
        let mel_patterns: Vec<Vec<f32>> = (0..vocab_size)
            .map(|_| (0..n_mels).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .collect();
        let mu_ref = 0.5 * (sr_range.0 + sr_range.1);
        Self {
            vocab_size,
            n_utterances,
            token_len_range,
            base_duration,
            gamma,
            sr_range,
            mu_ref,
            mel_patterns,
            mel_noise: 0.05,
            n_speakers: 1,
            frame_spec,
            seed,
        }
    }

    fn validate(&self) -> Result<(), CorpusError> {
        if self.vocab_size == 0 || self.n_utterances == 0 {
            return Err(CorpusError::InvalidSpec(
                "vocab_size and n_utterances must be positive".into(),
            ));
        }
        if self.token_len_range.0 == 0 || self.token_len_range.0 > self.token_len_range.1 {
            return Err(CorpusError::InvalidSpec("bad token length range".into()));
        }
        if !(self.sr_range.0 > 0.0 && self.sr_range.1 >= self.sr_range.0) {
            return Err(CorpusError::InvalidSpec("sr range must be positive".into()));
        }
        if !(self.mu_ref > 0.0) {
            return Err(CorpusError::InvalidSpec("mu_ref must be positive".into()));
        }
        if self.base_duration.len() != self.vocab_size || self.gamma.len() != self.vocab_size {
            return Err(CorpusError::InvalidSpec(
                "law tables must cover the vocabulary".into(),
            ));
        }
        if self.mel_patterns.len() != self.vocab_size
            || self
                .mel_patterns
                .iter()
                .any(|p| p.len() != self.frame_spec.n_mels)
        {
            return Err(CorpusError::InvalidSpec(
                "mel patterns must cover the vocabulary at n_mels width".into(),
            ));
        }
        if self.n_speakers == 0 {
            return Err(CorpusError::InvalidSpec("need at least one speaker".into()));
        }
        Ok(())
    }
}

/// The ground-truth duration law of a generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationLaw {
    pub base_duration: Vec<f64>,
    pub gamma: Vec<f64>,
    pub mu_ref: f64,
}

impl DurationLaw {
    /// Real-valued duration before rounding and clamping.
    pub fn real_duration(&self, token: u32, sr: f64) -> f64 {
        let t = token as usize;
        self.base_duration[t] * (sr / self.mu_ref).powf(self.gamma[t])
    }

    /// Frame count the generator assigns: rounded, clamped to at least 1.
    pub fn oracle_duration(&self, token: u32, sr: f64) -> u32 {
        (self.real_duration(token, sr).round() as i64).max(1) as u32
    }
}

/// Generate a corpus deterministically from `spec`.
pub fn generate_synthetic_corpus(
    spec: &SyntheticCorpusSpec,
) -> Result<(Vec<UtteranceRecord>, DurationLaw), CorpusError> {
    spec.validate()?;
    let law = DurationLaw {
        base_duration: spec.base_duration.clone(),
        gamma: spec.gamma.clone(),
        mu_ref: spec.mu_ref,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut corpus = Vec::with_capacity(spec.n_utterances);
    for u in 0..spec.n_utterances {
        let n_tokens = rng.gen_range(spec.token_len_range.0..=spec.token_len_range.1);
        let tokens: Vec<u32> = (0..n_tokens)
            .map(|_| rng.gen_range(0..spec.vocab_size as u32))
            .collect();
        let latent_sr = rng.gen_range(spec.sr_range.0..=spec.sr_range.1);
        let durations: Vec<u32> = tokens
            .iter()
            .map(|&t| law.oracle_duration(t, latent_sr))
            .collect();
        let total: usize = durations.iter().map(|&d| d as usize).sum();
        let mut mel = Array2::<f32>::zeros((total, spec.frame_spec.n_mels));
        let mut row = 0;
        for (&t, &d) in tokens.iter().zip(&durations) {
            let pattern = &spec.mel_patterns[t as usize];
            for _ in 0..d {
                for (c, &p) in pattern.iter().enumerate() {
                    let noise = if spec.mel_noise > 0.0 {
                        rng.gen_range(-spec.mel_noise..=spec.mel_noise)
                    } else {
                        0.0
                    };
                    mel[(row, c)] = p + noise;
                }
                row += 1;
            }
        }
        let speaker = format!("spk{}", u % spec.n_speakers);
        corpus.push(UtteranceRecord::new(
            format!("utt{u:05}"),
            speaker,
            tokens,
            durations,
            mel,
            &spec.frame_spec,
        )?);
    }
    Ok((corpus, law))
}

/// Mel template of a harmonic stack at `f0` hz: energy in every mel band
/// whose center lies near a harmonic. Useful for corpora whose synthesized
/// audio must carry a known pitch.
pub fn harmonic_mel_pattern(
    f0: f64,
    n_harmonics: usize,
    spec: &AudioFrameSpec,
    n_fft: usize,
) -> Vec<f32> {
    let filterbank = crate::inference::mel_filter_bank(spec, n_fft);
    let n_bins = n_fft / 2 + 1;
    let mut magnitude = vec![0.0f64; n_bins];
    let bin_hz = spec.sample_rate as f64 / n_fft as f64;
    for h in 1..=n_harmonics {
        let freq = f0 * h as f64;
        if freq >= spec.sample_rate as f64 / 2.0 {
            break;
        }
        let bin = (freq / bin_hz).round() as usize;
        if bin < n_bins {
            // Gentle rolloff keeps the fundamental dominant.
            magnitude[bin] = 1.0 / h as f64;
        }
    }
    (0..spec.n_mels)
        .map(|m| {
            let row = filterbank.row(m);
            row.iter()
                .zip(&magnitude)
                .map(|(&w, &x)| w * x)
                .sum::<f64>() as f32
        })
        .collect()
}
