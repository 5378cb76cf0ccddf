//! Optimization: losses, Adam, freeze presets and the training loop.

mod optimizer;
mod run;

pub use optimizer::Adam;
pub use run::{
    finetune, speaker_index_map, train, train_with_mask, write_loss_history_csv, TrainReport,
};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CorpusError;
use crate::model::{param_group, ModelError, ModelParameters, ParamGroup};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("training diverged at epoch {epoch}: total loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("corpus has {found} speakers but the model supports {supported}")]
    TooManySpeakers { found: usize, supported: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Optimizer and loop settings. Defaults follow the published setup:
/// Adam(0.9, 0.999, 1e-8), learning rate 1e-4, batch size 24, 500 epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Save a checkpoint every this many epochs (when a directory is given).
    pub checkpoint_every: Option<usize>,
    /// Global-norm gradient clip.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 24,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            checkpoint_every: None,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(TrainError::InvalidConfig(
                "learning_rate must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Which backbone groups stay frozen during fine-tuning. The duration
/// predictor (SR conditioner included) is always trainable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeConfig {
    pub freeze_encoder: bool,
    pub freeze_decoder: bool,
}

impl FreezeConfig {
    /// FT1: encoder and decoder frozen.
    pub fn ft1() -> Self {
        Self {
            freeze_encoder: true,
            freeze_decoder: true,
        }
    }

    /// FT2: decoder frozen.
    pub fn ft2() -> Self {
        Self {
            freeze_encoder: false,
            freeze_decoder: true,
        }
    }

    /// FT3: nothing frozen.
    pub fn ft3() -> Self {
        Self {
            freeze_encoder: false,
            freeze_decoder: false,
        }
    }

    /// Everything trainable (full training).
    pub fn none() -> Self {
        Self::ft3()
    }
}

impl std::str::FromStr for FreezeConfig {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ft1" => Ok(Self::ft1()),
            "ft2" => Ok(Self::ft2()),
            "ft3" => Ok(Self::ft3()),
            other => Err(TrainError::InvalidConfig(format!(
                "unknown freeze preset `{other}` (expected ft1 | ft2 | ft3)"
            ))),
        }
    }
}

/// Trainability decision per parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainableMask {
    freeze: FreezeConfig,
}

impl TrainableMask {
    pub fn all_trainable() -> Self {
        Self {
            freeze: FreezeConfig::none(),
        }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        match param_group(name) {
            ParamGroup::Encoder => !self.freeze.freeze_encoder,
            ParamGroup::Decoder => !self.freeze.freeze_decoder,
            ParamGroup::DurationPredictor => true,
        }
    }

    /// Trainable parameter names of `params`, in parameter order.
    pub fn trainable_names(&self, params: &ModelParameters) -> Vec<String> {
        params
            .names()
            .filter(|n| self.is_trainable(n))
            .map(str::to_string)
            .collect()
    }
}

/// Mask derived from a freeze configuration; the duration predictor group is
/// unconditionally included.
pub fn apply_freeze(freeze: FreezeConfig) -> TrainableMask {
    TrainableMask { freeze }
}

/// Loss values for one batch or epoch. Mel and duration terms are summed
/// with unit weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mel_loss: f64,
    pub duration_loss: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(mel_loss: f64, duration_loss: f64) -> Self {
        Self {
            mel_loss,
            duration_loss,
            total: mel_loss + duration_loss,
        }
    }
}

/// Mean squared error over all mel entries.
pub fn mel_loss(predicted: &Array2<f64>, target: &Array2<f64>) -> Result<f64, TrainError> {
    if predicted.dim() != target.dim() {
        return Err(TrainError::ShapeMismatch(format!(
            "predicted {:?} vs target {:?}",
            predicted.dim(),
            target.dim()
        )));
    }
    let n = predicted.len() as f64;
    let sum: f64 = predicted
        .iter()
        .zip(target.iter())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sum / n)
}

/// Gradient of [`mel_loss`] w.r.t. the prediction.
pub fn mel_loss_grad(predicted: &Array2<f64>, target: &Array2<f64>) -> Array2<f64> {
    let n = predicted.len() as f64;
    (predicted - target) * (2.0 / n)
}

/// MSE between predicted log-durations and `log(target + 1)`.
pub fn duration_loss(predicted_log: &Array1<f64>, target_frames: &[u32]) -> Result<f64, TrainError> {
    if predicted_log.len() != target_frames.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "{} predictions vs {} targets",
            predicted_log.len(),
            target_frames.len()
        )));
    }
    let n = predicted_log.len() as f64;
    let sum: f64 = predicted_log
        .iter()
        .zip(target_frames)
        .map(|(&p, &t)| {
            let d = p - ((t as f64) + 1.0).ln();
            d * d
        })
        .sum();
    Ok(sum / n)
}

/// Gradient of [`duration_loss`] w.r.t. the log predictions.
pub fn duration_loss_grad(predicted_log: &Array1<f64>, target_frames: &[u32]) -> Array1<f64> {
    let n = predicted_log.len() as f64;
    Array1::from_iter(
        predicted_log
            .iter()
            .zip(target_frames)
            .map(|(&p, &t)| 2.0 * (p - ((t as f64) + 1.0).ln()) / n),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mel_loss_trivial_cases() {
        let a = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(mel_loss(&a, &a).unwrap(), 0.0);
        let b = &a + 1.0;
        assert_eq!(mel_loss(&b, &a).unwrap(), 1.0);
        let bad = Array2::<f64>::zeros((3, 2));
        assert!(mel_loss(&a, &bad).is_err());
    }

    #[test]
    fn mel_loss_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p: Array2<f64> = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-2.0..2.0));
        let t: Array2<f64> = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-2.0..2.0));
        let mut direct = 0.0f64;
        for i in 0..4 {
            for j in 0..3 {
                direct += (p[(i, j)] - t[(i, j)]).powi(2);
            }
        }
        direct /= 12.0;
        assert!((mel_loss(&p, &t).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn duration_loss_trivial_cases() {
        let target = [3u32, 0, 7];
        let exact = Array1::from_iter(target.iter().map(|&t| ((t as f64) + 1.0).ln()));
        assert_eq!(duration_loss(&exact, &target).unwrap(), 0.0);

        let target1 = [4u32];
        let off = array![(5f64).ln() + 2.0];
        assert!((duration_loss(&off, &target1).unwrap() - 4.0).abs() < 1e-12);

        assert!(duration_loss(&off, &[1, 2]).is_err());
    }

    #[test]
    fn duration_loss_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let target: Vec<u32> = (0..9).map(|_| rng.gen_range(0..40)).collect();
        let pred = Array1::from_shape_fn(9, |_| rng.gen_range(-1.0..4.0));
        let direct = target
            .iter()
            .zip(pred.iter())
            .map(|(&t, &p)| (p - ((t as f64) + 1.0).ln()).powi(2))
            .sum::<f64>()
            / 9.0;
        assert!((duration_loss(&pred, &target).unwrap() - direct).abs() < 1e-15);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = Array2::from_shape_fn((3, 2), |_| rng.gen_range(-1.0..1.0));
        let t = Array2::from_shape_fn((3, 2), |_| rng.gen_range(-1.0..1.0));
        let g = mel_loss_grad(&p, &t);
        let eps = 1e-6;
        for i in 0..3 {
            for j in 0..2 {
                let mut pp = p.clone();
                pp[(i, j)] += eps;
                let mut pm = p.clone();
                pm[(i, j)] -= eps;
                let fd =
                    (mel_loss(&pp, &t).unwrap() - mel_loss(&pm, &t).unwrap()) / (2.0 * eps);
                assert!((g[(i, j)] - fd).abs() < 1e-8);
            }
        }

        let target: Vec<u32> = vec![2, 5, 9];
        let pred = Array1::from_shape_fn(3, |_| rng.gen_range(0.0..3.0));
        let g = duration_loss_grad(&pred, &target);
        for i in 0..3 {
            let mut pp = pred.clone();
            pp[i] += eps;
            let mut pm = pred.clone();
            pm[i] -= eps;
            let fd = (duration_loss(&pp, &target).unwrap()
                - duration_loss(&pm, &target).unwrap())
                / (2.0 * eps);
            assert!((g[i] - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn freeze_presets_match_the_table() {
        use crate::model::{DurationPredictorVariant, ModelConfig, ModelParameters};
        let cfg = ModelConfig::toy(DurationPredictorVariant::SraE);
        let params = ModelParameters::init(&cfg, 0).unwrap();

        let ft1 = apply_freeze(FreezeConfig::ft1());
        for name in ft1.trainable_names(&params) {
            assert!(name.starts_with("duration_predictor."), "{name}");
        }

        let ft2 = apply_freeze(FreezeConfig::ft2());
        let names2 = ft2.trainable_names(&params);
        assert!(names2.iter().any(|n| n.starts_with("encoder.")));
        assert!(!names2.iter().any(|n| n.starts_with("decoder.")));

        let ft3 = apply_freeze(FreezeConfig::ft3());
        assert_eq!(ft3.trainable_names(&params).len(), params.names().count());

        // The SR conditioner is trainable under every preset.
        assert!(ft1.is_trainable("duration_predictor.sr.proj.w"));
    }

    #[test]
    fn freeze_preset_parsing() {
        assert_eq!("ft1".parse::<FreezeConfig>().unwrap(), FreezeConfig::ft1());
        assert_eq!("FT3".parse::<FreezeConfig>().unwrap(), FreezeConfig::ft3());
        assert!("ft4".parse::<FreezeConfig>().is_err());
    }
}
