//! SR-aware training data selection: random, tail-first and narrow modes.
//!
//! Selection always operates per speaker with a per-speaker audio budget in
//! seconds. The budget boundary rule is: accumulate until cumulative seconds
//! first reach the budget, including the utterance that crosses it.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use super::{sr_statistics_from_rates, AudioFrameSpec, CorpusError, UtteranceRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionKind {
    /// Random selection: uniform without replacement up to the budget.
    Rs,
    /// Tail-first: everything beyond 1.5 std from the per-speaker mean is
    /// taken first (furthest first), random fill afterwards.
    Ts,
    /// Narrow selection: candidate pool limited to `|SR - mean| <= width*std`.
    Ns,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionStrategy {
    pub kind: SelectionKind,
    /// Band half-width in multiples of the std; only used for NS
    /// (1.0 or 1.5 in the published setups).
    pub ns_width: Option<f64>,
    /// Per-speaker audio budget in seconds.
    pub budget_seconds: f64,
    pub seed: u64,
}

/// Distance beyond which an utterance counts as a distribution tail for TS.
const TS_TAIL_STD: f64 = 1.5;

impl SelectionStrategy {
    pub fn random(budget_seconds: f64, seed: u64) -> Self {
        Self {
            kind: SelectionKind::Rs,
            ns_width: None,
            budget_seconds,
            seed,
        }
    }

    pub fn tail_first(budget_seconds: f64, seed: u64) -> Self {
        Self {
            kind: SelectionKind::Ts,
            ns_width: None,
            budget_seconds,
            seed,
        }
    }

    pub fn narrow(ns_width: f64, budget_seconds: f64, seed: u64) -> Self {
        Self {
            kind: SelectionKind::Ns,
            ns_width: Some(ns_width),
            budget_seconds,
            seed,
        }
    }

    fn validate(&self) -> Result<(), CorpusError> {
        if !(self.budget_seconds > 0.0) {
            return Err(CorpusError::InvalidStrategy(
                "budget_seconds must be positive".into(),
            ));
        }
        if self.kind == SelectionKind::Ns {
            match self.ns_width {
                Some(w) if w > 0.0 => {}
                _ => {
                    return Err(CorpusError::InvalidStrategy(
                        "NS requires ns_width > 0".into(),
                    ))
                }
            }
        }
        Ok(())
    }
}

/// Stable per-speaker stream so adding one speaker never reshuffles another.
fn speaker_seed(seed: u64, speaker: &str) -> u64 {
    // FNV-1a over the speaker id.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in speaker.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    seed ^ h
}

/// Select a training subset per speaker under `strategy`.
///
/// Returns indices into `corpus` grouped by speaker (speakers in sorted
/// order), selection order preserved within each speaker.
pub fn select_training_subset(
    corpus: &[UtteranceRecord],
    strategy: &SelectionStrategy,
    spec: &AudioFrameSpec,
) -> Result<Vec<usize>, CorpusError> {
    strategy.validate()?;
    let mut by_speaker: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in corpus.iter().enumerate() {
        by_speaker.entry(r.speaker_id.as_str()).or_default().push(i);
    }

    let mut selected = Vec::new();
    for (speaker, indices) in by_speaker {
        let mut rng = ChaCha8Rng::seed_from_u64(speaker_seed(strategy.seed, speaker));
        let chosen = select_for_speaker(corpus, &indices, strategy, spec, speaker, &mut rng)?;
        selected.extend(chosen);
    }
    Ok(selected)
}

fn select_for_speaker(
    corpus: &[UtteranceRecord],
    indices: &[usize],
    strategy: &SelectionStrategy,
    spec: &AudioFrameSpec,
    speaker: &str,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>, CorpusError> {
    let rates: Vec<f64> = indices.iter().map(|&i| corpus[i].speaking_rate).collect();
    let stats = sr_statistics_from_rates(&rates, 1)?;
    let budget = strategy.budget_seconds;

    match strategy.kind {
        SelectionKind::Rs => {
            let mut pool = indices.to_vec();
            pool.shuffle(rng);
            Ok(take_until_budget(corpus, &pool, budget, spec))
        }
        SelectionKind::Ts => {
            let mut tail: Vec<usize> = indices
                .iter()
                .copied()
                .filter(|&i| (corpus[i].speaking_rate - stats.mean).abs() > TS_TAIL_STD * stats.std)
                .collect();
            // Furthest from the mean first; ties broken by id for determinism.
            tail.sort_by(|&a, &b| {
                let da = (corpus[a].speaking_rate - stats.mean).abs();
                let db = (corpus[b].speaking_rate - stats.mean).abs();
                db.partial_cmp(&da)
                    .unwrap()
                    .then_with(|| corpus[a].id.cmp(&corpus[b].id))
            });
            let mut chosen = take_until_budget(corpus, &tail, budget, spec);
            let used: f64 = chosen.iter().map(|&i| corpus[i].seconds(spec)).sum();
            if used < budget {
                let mut rest: Vec<usize> = indices
                    .iter()
                    .copied()
                    .filter(|i| !chosen.contains(i))
                    .collect();
                rest.shuffle(rng);
                chosen.extend(take_until_budget(corpus, &rest, budget - used, spec));
            }
            Ok(chosen)
        }
        SelectionKind::Ns => {
            let width = strategy.ns_width.expect("validated");
            let mut pool: Vec<usize> = indices
                .iter()
                .copied()
                .filter(|&i| (corpus[i].speaking_rate - stats.mean).abs() <= width * stats.std)
                .collect();
            let achievable: f64 = pool.iter().map(|&i| corpus[i].seconds(spec)).sum();
            if achievable < budget {
                return Err(CorpusError::InsufficientData {
                    speaker: speaker.to_string(),
                    achievable_seconds: achievable,
                    budget_seconds: budget,
                });
            }
            pool.shuffle(rng);
            Ok(take_until_budget(corpus, &pool, budget, spec))
        }
    }
}

fn take_until_budget(
    corpus: &[UtteranceRecord],
    ordered: &[usize],
    budget: f64,
    spec: &AudioFrameSpec,
) -> Vec<usize> {
    let mut out = Vec::new();
    let mut cum = 0.0;
    for &i in ordered {
        if cum >= budget {
            break;
        }
        out.push(i);
        cum += corpus[i].seconds(spec);
    }
    out
}
