//! The training loop and baseline-to-SRA fine-tuning.
//!
//! Batches are groups of utterances processed one by one; the batch loss is
//! the mean over items of each item's per-element mean losses. That weighting
//! is exactly the padded-batch convention with masks excluding every pad
//! entry, without materializing pads, so padding can never leak into a loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{
    apply_freeze, duration_loss, duration_loss_grad, mel_loss, mel_loss_grad, Adam, FreezeConfig,
    LossBreakdown, TrainConfig, TrainError, TrainableMask,
};
use crate::corpus::UtteranceRecord;
use crate::model::{
    backward_train, forward_train, save_checkpoint, Gradients, ModelConfig, ModelParameters,
};

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// One entry per epoch: means over the epoch's utterances.
    pub loss_history: Vec<LossBreakdown>,
    pub checkpoint_paths: Vec<PathBuf>,
}

/// Sorted speaker-id -> model speaker index mapping for a corpus.
pub fn speaker_index_map(corpus: &[UtteranceRecord]) -> BTreeMap<String, usize> {
    let mut speakers: Vec<&str> = corpus.iter().map(|r| r.speaker_id.as_str()).collect();
    speakers.sort_unstable();
    speakers.dedup();
    speakers
        .into_iter()
        .enumerate()
        .map(|(i, s)| (s.to_string(), i))
        .collect()
}

/// Train every parameter.
pub fn train(
    params: &mut ModelParameters,
    corpus: &[UtteranceRecord],
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainReport, TrainError> {
    train_with_mask(params, corpus, config, &TrainableMask::all_trainable(), checkpoint_dir)
}

/// Train the parameters selected by `mask`. Deterministic given
/// `config.seed`: shuffle order, batch assembly and all reductions are fixed.
pub fn train_with_mask(
    params: &mut ModelParameters,
    corpus: &[UtteranceRecord],
    config: &TrainConfig,
    mask: &TrainableMask,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let speakers = speaker_index_map(corpus);
    if speakers.len() > params.config().n_speakers {
        return Err(TrainError::TooManySpeakers {
            found: speakers.len(),
            supported: params.config().n_speakers,
        });
    }
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config);
    let mut history = Vec::with_capacity(config.epochs);
    let mut checkpoint_paths = Vec::new();
    let mut order: Vec<usize> = (0..corpus.len()).collect();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_mel = 0.0;
        let mut epoch_dur = 0.0;
        for batch in order.chunks(config.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let mut grads = Gradients::zeros_like(params);
            for &idx in batch {
                let record = &corpus[idx];
                let speaker = speakers[&record.speaker_id];
                let out = forward_train(record, speaker, params)?;
                let target = record.mel.mapv(|v| v as f64);
                let mel_l = mel_loss(&out.mel, &target)?;
                let dur_l = duration_loss(&out.log_durations, &record.durations)?;
                epoch_mel += mel_l;
                epoch_dur += dur_l;
                // Batch loss is the mean over items, so per-item output
                // gradients are scaled before backprop.
                let dmel = mel_loss_grad(&out.mel, &target) * scale;
                let dlogd = duration_loss_grad(&out.log_durations, &record.durations) * scale;
                let item_grads = backward_train(params, &out.trace, &dmel, &dlogd);
                grads.accumulate(&item_grads);
            }
            clip_global_norm(&mut grads, mask, config.grad_clip);
            adam.step(params, &grads, mask);
        }
        let n = corpus.len() as f64;
        let breakdown = LossBreakdown::new(epoch_mel / n, epoch_dur / n);
        if !breakdown.total.is_finite() {
            return Err(TrainError::Diverged {
                epoch,
                loss: breakdown.total,
            });
        }
        history.push(breakdown);

        if let (Some(dir), Some(every)) = (checkpoint_dir, config.checkpoint_every) {
            if every > 0 && (epoch + 1) % every == 0 {
                let path = dir.join(format!("epoch_{:04}.ckpt", epoch + 1));
                save_checkpoint(params, &path)?;
                checkpoint_paths.push(path);
            }
        }
    }

    if let Some(dir) = checkpoint_dir {
        let path = dir.join("final.ckpt");
        save_checkpoint(params, &path)?;
        checkpoint_paths.push(path);
    }
    Ok(TrainReport {
        loss_history: history,
        checkpoint_paths,
    })
}

fn clip_global_norm(grads: &mut Gradients, mask: &TrainableMask, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads
        .iter()
        .filter(|(name, _)| mask.is_trainable(name))
        .map(|(_, g)| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let factor = max_norm / norm;
        for (name, g) in grads.iter_mut() {
            if mask.is_trainable(name) {
                *g *= factor;
            }
        }
    }
}

/// Adapt a pretrained baseline into an SRA variant.
///
/// Backbone arrays (and the duration-predictor conv/dense weights, whose
/// shapes coincide) are copied from the checkpoint; only the SR conditioner
/// is freshly initialized. Training then honors the freeze configuration;
/// with zero epochs the copied weights are returned untouched.
pub fn finetune(
    pretrained: &ModelParameters,
    target_config: &ModelConfig,
    corpus: &[UtteranceRecord],
    freeze: FreezeConfig,
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(ModelParameters, TrainReport), TrainError> {
    use crate::model::{DurationPredictorVariant, ModelError};
    if pretrained.config().variant != DurationPredictorVariant::Baseline {
        return Err(TrainError::Model(ModelError::VariantMismatch(
            "fine-tuning starts from a baseline checkpoint".into(),
        )));
    }
    if !target_config.variant.requires_speaking_rate() {
        return Err(TrainError::Model(ModelError::VariantMismatch(
            "fine-tuning target must be an SRA variant".into(),
        )));
    }
    if !pretrained.config().compatible_dims(target_config) {
        return Err(TrainError::Model(ModelError::InvalidConfig(
            "checkpoint dimensions do not match the target config".into(),
        )));
    }

    let mut target = ModelParameters::init(target_config, config.seed)?;
    let copied: Vec<String> = pretrained.names().map(str::to_string).collect();
    for name in &copied {
        target.set(name, pretrained.get(name).clone())?;
    }

    let mask = apply_freeze(freeze);
    let report = train_with_mask(&mut target, corpus, config, &mask, checkpoint_dir)?;
    Ok((target, report))
}

/// Loss history as CSV: `epoch,mel_loss,duration_loss,total`.
pub fn write_loss_history_csv(history: &[LossBreakdown], path: &Path) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "epoch,mel_loss,duration_loss,total")?;
    for (epoch, loss) in history.iter().enumerate() {
        writeln!(
            w,
            "{},{},{},{}",
            epoch + 1,
            loss.mel_loss,
            loss.duration_loss,
            loss.total
        )?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{AudioFrameSpec, SyntheticCorpusSpec};
    use crate::model::DurationPredictorVariant;

    fn tiny_corpus(n: usize, seed: u64) -> Vec<UtteranceRecord> {
        let spec = SyntheticCorpusSpec::with_random_law(
            6,
            n,
            (2, 4),
            (2.0, 5.0),
            (0.8, 1.2),
            (0.03, 0.05),
            AudioFrameSpec::new(22050, 256, 6),
            seed,
        );
        crate::corpus::generate_synthetic_corpus(&spec).unwrap().0
    }

    fn quick_config(epochs: usize, lr: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 4,
            learning_rate: lr,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn empty_corpus_errors() {
        let cfg = ModelConfig::toy(DurationPredictorVariant::Baseline);
        let mut params = ModelParameters::init(&cfg, 0).unwrap();
        let err = train(&mut params, &[], &quick_config(1, 1e-3, 0), None).unwrap_err();
        assert!(matches!(err, TrainError::EmptyCorpus));
    }

    #[test]
    fn same_seed_gives_bitwise_identical_histories() {
        let corpus = tiny_corpus(6, 2);
        let cfg = ModelConfig::toy(DurationPredictorVariant::SraE);
        let tc = quick_config(3, 1e-3, 7);

        let mut p1 = ModelParameters::init(&cfg, 1).unwrap();
        let h1 = train(&mut p1, &corpus, &tc, None).unwrap().loss_history;
        let mut p2 = ModelParameters::init(&cfg, 1).unwrap();
        let h2 = train(&mut p2, &corpus, &tc, None).unwrap().loss_history;
        assert_eq!(p1, p2);
        for (a, b) in h1.iter().zip(&h2) {
            assert_eq!(a.mel_loss.to_bits(), b.mel_loss.to_bits());
            assert_eq!(a.duration_loss.to_bits(), b.duration_loss.to_bits());
            assert_eq!(a.total.to_bits(), b.total.to_bits());
        }
    }

    #[test]
    fn single_utterance_overfits() {
        let corpus: Vec<UtteranceRecord> = tiny_corpus(1, 5);
        let cfg = ModelConfig::toy(DurationPredictorVariant::Baseline);
        let mut params = ModelParameters::init(&cfg, 3).unwrap();
        let tc = TrainConfig {
            epochs: 200,
            batch_size: 1,
            learning_rate: 5e-3,
            seed: 0,
            ..TrainConfig::default()
        };
        let report = train(&mut params, &corpus, &tc, None).unwrap();
        let first = report.loss_history.first().unwrap().total;
        let last = report.loss_history.last().unwrap().total;
        assert!(
            last <= 0.1 * first,
            "expected >= 90% decrease, got {first} -> {last}"
        );
    }

    #[test]
    fn batch_loss_equals_mean_of_per_utterance_losses() {
        // One batch, zero learning rate: the epoch entry must equal the mean
        // of individually computed unpadded losses.
        let corpus = tiny_corpus(5, 9);
        let cfg = ModelConfig::toy(DurationPredictorVariant::Baseline);
        let mut params = ModelParameters::init(&cfg, 2).unwrap();
        let tc = TrainConfig {
            epochs: 1,
            batch_size: 16,
            learning_rate: 0.0,
            seed: 4,
            ..TrainConfig::default()
        };
        let speakers = speaker_index_map(&corpus);
        let mut mel_sum = 0.0;
        let mut dur_sum = 0.0;
        for rec in &corpus {
            let out = forward_train(rec, speakers[&rec.speaker_id], &params).unwrap();
            mel_sum += mel_loss(&out.mel, &rec.mel.mapv(|v| v as f64)).unwrap();
            dur_sum += duration_loss(&out.log_durations, &rec.durations).unwrap();
        }
        let report = train(&mut params, &corpus, &tc, None).unwrap();
        let got = report.loss_history[0];
        let n = corpus.len() as f64;
        assert!((got.mel_loss - mel_sum / n).abs() < 1e-12);
        assert!((got.duration_loss - dur_sum / n).abs() < 1e-12);
        assert!((got.total - (mel_sum + dur_sum) / n).abs() < 1e-12);
    }

    #[test]
    fn finetune_zero_epochs_preserves_copied_weights() {
        let corpus = tiny_corpus(4, 11);
        let base_cfg = ModelConfig::toy(DurationPredictorVariant::Baseline);
        let pretrained = ModelParameters::init(&base_cfg, 8).unwrap();
        let mut target_cfg = base_cfg.clone();
        target_cfg.variant = DurationPredictorVariant::SraE;
        let (tuned, report) = finetune(
            &pretrained,
            &target_cfg,
            &corpus,
            FreezeConfig::ft1(),
            &quick_config(0, 1e-3, 0),
            None,
        )
        .unwrap();
        assert!(report.loss_history.is_empty());
        for (name, arr) in pretrained.iter() {
            assert_eq!(arr, tuned.get(name), "{name}");
        }
    }

    #[test]
    fn finetune_initializes_exactly_the_sr_arrays() {
        let corpus = tiny_corpus(4, 11);
        let base_cfg = ModelConfig::toy(DurationPredictorVariant::Baseline);
        let pretrained = ModelParameters::init(&base_cfg, 8).unwrap();
        let mut target_cfg = base_cfg.clone();
        target_cfg.variant = DurationPredictorVariant::SraE;
        let (tuned, _) = finetune(
            &pretrained,
            &target_cfg,
            &corpus,
            FreezeConfig::ft1(),
            &quick_config(0, 1e-3, 0),
            None,
        )
        .unwrap();
        let pretrained_names: std::collections::BTreeSet<String> =
            pretrained.names().map(str::to_string).collect();
        let tuned_names: std::collections::BTreeSet<String> =
            tuned.names().map(str::to_string).collect();
        let new_names: Vec<&String> = tuned_names.difference(&pretrained_names).collect();
        assert!(!new_names.is_empty());
        for name in new_names {
            assert!(name.starts_with("duration_predictor.sr."), "{name}");
        }
    }

    #[test]
    fn finetune_rejects_sra_checkpoint_and_bad_dims() {
        let corpus = tiny_corpus(2, 1);
        let sra_cfg = ModelConfig::toy(DurationPredictorVariant::SraE);
        let sra_params = ModelParameters::init(&sra_cfg, 0).unwrap();
        assert!(finetune(
            &sra_params,
            &sra_cfg,
            &corpus,
            FreezeConfig::ft1(),
            &quick_config(0, 1e-3, 0),
            None
        )
        .is_err());

        let base_cfg = ModelConfig::toy(DurationPredictorVariant::Baseline);
        let pretrained = ModelParameters::init(&base_cfg, 0).unwrap();
        let mut bad_cfg = base_cfg.clone();
        bad_cfg.variant = DurationPredictorVariant::SraE;
        bad_cfg.d_model = base_cfg.d_model + 2;
        assert!(finetune(
            &pretrained,
            &bad_cfg,
            &corpus,
            FreezeConfig::ft1(),
            &quick_config(0, 1e-3, 0),
            None
        )
        .is_err());
    }

    #[test]
    fn ft1_freezes_backbone_during_finetune() {
        let corpus = tiny_corpus(4, 13);
        let base_cfg = ModelConfig::toy(DurationPredictorVariant::Baseline);
        let pretrained = ModelParameters::init(&base_cfg, 8).unwrap();
        let mut target_cfg = base_cfg.clone();
        target_cfg.variant = DurationPredictorVariant::SraB;
        let (tuned, _) = finetune(
            &pretrained,
            &target_cfg,
            &corpus,
            FreezeConfig::ft1(),
            &quick_config(3, 1e-3, 0),
            None,
        )
        .unwrap();
        for (name, arr) in pretrained.iter() {
            if name.starts_with("encoder.") || name.starts_with("decoder.") {
                assert_eq!(arr, tuned.get(name), "{name}");
            }
        }
        // The duration predictor must have moved.
        assert_ne!(
            pretrained.get("duration_predictor.out_proj.w"),
            tuned.get("duration_predictor.out_proj.w")
        );
    }

    #[test]
    fn divergence_guard_trips_on_nonfinite_loss() {
        let corpus = tiny_corpus(2, 3);
        let cfg = ModelConfig::toy(DurationPredictorVariant::Baseline);
        let mut params = ModelParameters::init(&cfg, 0).unwrap();
        // Poison a weight so the forward pass goes non-finite.
        params.get_mut("decoder.mel_head.w")[(0, 0)] = f64::NAN;
        let err = train(&mut params, &corpus, &quick_config(1, 1e-3, 0), None).unwrap_err();
        assert!(matches!(err, TrainError::Diverged { .. }));
    }
}
