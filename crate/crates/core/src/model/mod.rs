//! FastSpeech-style backbone with rate-conditionable duration prediction.
//!
//! The network is encoder -> duration predictor -> length regulator ->
//! decoder. Token and frame sequences run through post-norm transformer
//! blocks whose feed-forward is a pair of kernel-3 convolutions. The duration
//! predictor is an input projection, two conv+relu+layernorm blocks and a
//! final dense layer producing one log-duration per token; its three variants
//! differ only in where (or whether) the speaking-rate cross-attention block
//! is inserted.

mod backward;
mod checkpoint;
mod forward;
mod layers;
mod params;

pub use backward::backward_train;
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use forward::{
    decode, duration_features, encode, forward_train, length_regulate, predict_durations,
    sr_attention, sr_embed, DurationStage, ForwardTrainOutput, SrAttentionOutput, TrainTrace,
};
pub use params::{
    count_parameters, param_group, parameter_shapes, sr_conditioner_parameter_count, Gradients,
    ModelParameters, ParamGroup, ShapeTable,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Duration value floor used when exposing real-valued frame counts.
pub const DURATION_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("token id {token} at position {position} out of range (vocab {vocab})")]
    TokenOutOfRange {
        position: usize,
        token: u32,
        vocab: usize,
    },
    #[error("speaker id {0} out of range ({1} speakers)")]
    SpeakerOutOfRange(usize, usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("variant mismatch: {0}")]
    VariantMismatch(String),
    #[error("speaking rate must be positive, got {0}")]
    NonPositiveSpeakingRate(f64),
    #[error("durations are all zero")]
    AllZeroDurations,
    #[error("{frames} frames exceed the positional horizon of {max_frames}")]
    PositionalHorizon { frames: usize, max_frames: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Where the speaking-rate attention sits inside the duration predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DurationPredictorVariant {
    /// Plain duration predictor; rate control only via pace scaling.
    Baseline,
    /// Rate attention after the conv stack, before the final dense layer.
    SraE,
    /// Rate attention on the projected encoder output, before the conv stack.
    SraB,
}

impl DurationPredictorVariant {
    pub fn requires_speaking_rate(self) -> bool {
        self != DurationPredictorVariant::Baseline
    }

    pub fn label(self) -> &'static str {
        match self {
            DurationPredictorVariant::Baseline => "baseline",
            DurationPredictorVariant::SraE => "sra-e",
            DurationPredictorVariant::SraB => "sra-b",
        }
    }
}

impl std::str::FromStr for DurationPredictorVariant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(Self::Baseline),
            "sra-e" | "sra_e" | "srae" => Ok(Self::SraE),
            "sra-b" | "sra_b" | "srab" => Ok(Self::SraB),
            other => Err(ModelError::InvalidConfig(format!(
                "unknown variant `{other}` (expected baseline | sra-e | sra-b)"
            ))),
        }
    }
}

/// Full hyperparameter record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub d_attn: usize,
    /// Feature width of the duration predictor and of the SR embedding.
    pub d_duration: usize,
    pub n_mels: usize,
    pub vocab_size: usize,
    pub n_speakers: usize,
    pub variant: DurationPredictorVariant,
    /// Positional-encoding horizon for decoder inputs.
    pub max_frames: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::paper(DurationPredictorVariant::Baseline)
    }
}

impl ModelConfig {
    /// The published configuration: 6+6 layers, single-head attention,
    /// d_model 384, feed-forward 1536, attention width 64, duration features
    /// 256. Vocabulary and mel width are not published; 75 phonemes and 80
    /// mel bands are assumed.
    pub fn paper(variant: DurationPredictorVariant) -> Self {
        Self {
            n_encoder_layers: 6,
            n_decoder_layers: 6,
            n_heads: 1,
            d_model: 384,
            d_ff: 1536,
            d_attn: 64,
            d_duration: 256,
            n_mels: 80,
            vocab_size: 75,
            n_speakers: 3,
            variant,
            max_frames: 8192,
        }
    }

    /// A small configuration for tests and desk-scale experiments.
    pub fn toy(variant: DurationPredictorVariant) -> Self {
        Self {
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            n_heads: 1,
            d_model: 10,
            d_ff: 16,
            d_attn: 8,
            d_duration: 5,
            n_mels: 6,
            vocab_size: 20,
            n_speakers: 2,
            variant,
            max_frames: 2048,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("n_encoder_layers", self.n_encoder_layers),
            ("n_decoder_layers", self.n_decoder_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("d_attn", self.d_attn),
            ("d_duration", self.d_duration),
            ("n_mels", self.n_mels),
            ("vocab_size", self.vocab_size),
            ("n_speakers", self.n_speakers),
            ("max_frames", self.max_frames),
        ];
        for (name, value) in dims {
            if value == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Dimensions that must agree for checkpoint weights to be transferable.
    pub fn compatible_dims(&self, other: &ModelConfig) -> bool {
        self.n_encoder_layers == other.n_encoder_layers
            && self.n_decoder_layers == other.n_decoder_layers
            && self.n_heads == other.n_heads
            && self.d_model == other.d_model
            && self.d_ff == other.d_ff
            && self.d_attn == other.d_attn
            && self.d_duration == other.d_duration
            && self.n_mels == other.n_mels
            && self.vocab_size == other.vocab_size
            && self.n_speakers == other.n_speakers
    }
}
