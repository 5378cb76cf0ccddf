//! Named parameter storage.
//!
//! Every trainable array is a 2-D `f64` matrix addressed by a dotted path
//! (`encoder.layer0.attn.wq`, `duration_predictor.sr.proj.w`, ...). The shape
//! table derived from a [`ModelConfig`] is the single source of truth for
//! initialization, checkpoints, gradient storage, freeze masks and parameter
//! counting. Vectors (biases, layer-norm scales) are stored as `1 x d` rows.

use indexmap::IndexMap;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DurationPredictorVariant, ModelConfig, ModelError};

/// Freeze groups used by fine-tuning. Every parameter belongs to exactly one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Encoder,
    Decoder,
    /// Includes the SR conditioner; always trainable during fine-tuning.
    DurationPredictor,
}

/// Group of a parameter path.
pub fn param_group(name: &str) -> ParamGroup {
    if name.starts_with("encoder.") {
        ParamGroup::Encoder
    } else if name.starts_with("decoder.") {
        ParamGroup::Decoder
    } else if name.starts_with("duration_predictor.") {
        ParamGroup::DurationPredictor
    } else {
        panic!("parameter `{name}` belongs to no freeze group");
    }
}

fn attention_shapes(prefix: &str, d_in: usize, d_inner: usize, shapes: &mut ShapeTable) {
    shapes.push(format!("{prefix}.wq"), (d_in, d_inner));
    shapes.push(format!("{prefix}.bq"), (1, d_inner));
    shapes.push(format!("{prefix}.wk"), (d_in, d_inner));
    shapes.push(format!("{prefix}.bk"), (1, d_inner));
    shapes.push(format!("{prefix}.wv"), (d_in, d_inner));
    shapes.push(format!("{prefix}.bv"), (1, d_inner));
    shapes.push(format!("{prefix}.wo"), (d_inner, d_in));
    shapes.push(format!("{prefix}.bo"), (1, d_in));
}

fn transformer_layer_shapes(prefix: &str, cfg: &ModelConfig, shapes: &mut ShapeTable) {
    let d_inner = cfg.n_heads * cfg.d_attn;
    attention_shapes(&format!("{prefix}.attn"), cfg.d_model, d_inner, shapes);
    shapes.push(format!("{prefix}.ln1.gamma"), (1, cfg.d_model));
    shapes.push(format!("{prefix}.ln1.beta"), (1, cfg.d_model));
    // Kernel-3 convolutional feed-forward; rows are tap-major.
    shapes.push(format!("{prefix}.ffn.conv1.w"), (3 * cfg.d_model, cfg.d_ff));
    shapes.push(format!("{prefix}.ffn.conv1.b"), (1, cfg.d_ff));
    shapes.push(format!("{prefix}.ffn.conv2.w"), (3 * cfg.d_ff, cfg.d_model));
    shapes.push(format!("{prefix}.ffn.conv2.b"), (1, cfg.d_model));
    shapes.push(format!("{prefix}.ln2.gamma"), (1, cfg.d_model));
    shapes.push(format!("{prefix}.ln2.beta"), (1, cfg.d_model));
}

pub type ShapeTable = IndexMap<String, (usize, usize)>;

trait ShapePush {
    fn push(&mut self, name: String, shape: (usize, usize));
}

impl ShapePush for ShapeTable {
    fn push(&mut self, name: String, shape: (usize, usize)) {
        let prev = self.insert(name.clone(), shape);
        debug_assert!(prev.is_none(), "duplicate parameter {name}");
    }
}

/// Ordered `name -> (rows, cols)` table for a configuration.
pub fn parameter_shapes(cfg: &ModelConfig) -> ShapeTable {
    let mut shapes = ShapeTable::new();
    shapes.push("encoder.token_embedding".into(), (cfg.vocab_size, cfg.d_model));
    shapes.push(
        "encoder.speaker_embedding".into(),
        (cfg.n_speakers, cfg.d_model),
    );
    for i in 0..cfg.n_encoder_layers {
        transformer_layer_shapes(&format!("encoder.layer{i}"), cfg, &mut shapes);
    }
    for i in 0..cfg.n_decoder_layers {
        transformer_layer_shapes(&format!("decoder.layer{i}"), cfg, &mut shapes);
    }
    shapes.push("decoder.mel_head.w".into(), (cfg.d_model, cfg.n_mels));
    shapes.push("decoder.mel_head.b".into(), (1, cfg.n_mels));

    let d = cfg.d_duration;
    shapes.push("duration_predictor.input_proj.w".into(), (cfg.d_model, d));
    shapes.push("duration_predictor.input_proj.b".into(), (1, d));
    shapes.push("duration_predictor.conv1.w".into(), (3 * d, d));
    shapes.push("duration_predictor.conv1.b".into(), (1, d));
    shapes.push("duration_predictor.ln1.gamma".into(), (1, d));
    shapes.push("duration_predictor.ln1.beta".into(), (1, d));
    shapes.push("duration_predictor.conv2.w".into(), (3 * d, d));
    shapes.push("duration_predictor.conv2.b".into(), (1, d));
    shapes.push("duration_predictor.ln2.gamma".into(), (1, d));
    shapes.push("duration_predictor.ln2.beta".into(), (1, d));
    shapes.push("duration_predictor.out_proj.w".into(), (d, 1));
    shapes.push("duration_predictor.out_proj.b".into(), (1, 1));

    if cfg.variant != DurationPredictorVariant::Baseline {
        shapes.push("duration_predictor.sr.proj.w".into(), (1, d));
        shapes.push("duration_predictor.sr.proj.b".into(), (1, d));
        attention_shapes("duration_predictor.sr.attn", d, cfg.d_attn, &mut shapes);
        shapes.push("duration_predictor.sr.ln.gamma".into(), (1, d));
        shapes.push("duration_predictor.sr.ln.beta".into(), (1, d));
    }
    shapes
}

/// Exact count of trainable scalars for a configuration.
pub fn count_parameters(cfg: &ModelConfig) -> usize {
    parameter_shapes(cfg).values().map(|(r, c)| r * c).sum()
}

/// Scalar count of the SR conditioner alone (zero for the baseline).
pub fn sr_conditioner_parameter_count(cfg: &ModelConfig) -> usize {
    parameter_shapes(cfg)
        .iter()
        .filter(|(name, _)| name.starts_with("duration_predictor.sr."))
        .map(|(_, (r, c))| r * c)
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    config: ModelConfig,
    entries: IndexMap<String, Array2<f64>>,
}

fn name_hash(name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn is_zero_initialized(name: &str) -> bool {
    // Biases and layer-norm shifts start at zero; the SR value/output
    // projections are zeroed so rate conditioning starts inert.
    name.ends_with(".b")
        || name.ends_with(".bq")
        || name.ends_with(".bk")
        || name.ends_with(".bv")
        || name.ends_with(".bo")
        || name.ends_with(".beta")
        || name.starts_with("duration_predictor.sr.attn.wv")
        || name.starts_with("duration_predictor.sr.attn.wo")
}

impl ModelParameters {
    /// Seeded initialization: fan-in uniform weights, zero biases, unit
    /// layer-norm scales. Each array draws from its own stream keyed by
    /// `(seed, name)`, so shared arrays match across variants.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut entries = IndexMap::new();
        for (name, (rows, cols)) in parameter_shapes(config) {
            let arr = if name.ends_with(".gamma") {
                Array2::ones((rows, cols))
            } else if is_zero_initialized(&name) {
                Array2::zeros((rows, cols))
            } else if name.ends_with("_embedding") {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(&name));
                Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-0.1..0.1))
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(&name));
                let bound = 1.0 / (rows as f64).sqrt();
                Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
            };
            entries.insert(name, arr);
        }
        Ok(Self {
            config: config.clone(),
            entries,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array2<f64>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total scalar count.
    pub fn len_scalars(&self) -> usize {
        self.entries.values().map(|a| a.len()).sum()
    }

    /// Replace an entry, validating the shape.
    pub fn set(&mut self, name: &str, value: Array2<f64>) -> Result<(), ModelError> {
        let current = self
            .entries
            .get_mut(name)
            .ok_or_else(|| ModelError::UnknownParameter(name.to_string()))?;
        if current.dim() != value.dim() {
            return Err(ModelError::ShapeMismatch(format!(
                "parameter `{name}`: expected {:?}, got {:?}",
                current.dim(),
                value.dim()
            )));
        }
        *current = value;
        Ok(())
    }
}

/// Gradient (or any parameter-shaped) accumulator.
#[derive(Debug, Clone)]
pub struct Gradients {
    entries: IndexMap<String, Array2<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParameters) -> Self {
        let entries = params
            .entries
            .iter()
            .map(|(k, v)| (k.clone(), Array2::zeros(v.dim())))
            .collect();
        Self { entries }
    }

    pub fn add(&mut self, name: &str, delta: Array2<f64>) {
        let entry = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown gradient entry `{name}`"));
        debug_assert_eq!(entry.dim(), delta.dim(), "gradient shape for {name}");
        *entry += &delta;
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown gradient entry `{name}`"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array2<f64>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Elementwise `self += other`.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (k, v) in other.entries.iter() {
            *self.entries.get_mut(k).expect("gradient key") += v;
        }
    }

    /// Elementwise scale.
    pub fn scale(&mut self, factor: f64) {
        for v in self.entries.values_mut() {
            *v *= factor;
        }
    }

    /// Global L2 norm over all entries.
    pub fn global_norm(&self) -> f64 {
        self.entries
            .values()
            .map(|a| a.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DurationPredictorVariant, ModelConfig};

    #[test]
    fn affine_entry_counts() {
        // A 10 -> 5 affine map with bias contributes 55 scalars.
        let cfg = ModelConfig::toy(DurationPredictorVariant::Baseline);
        let shapes = parameter_shapes(&cfg);
        let (r, c) = shapes["duration_predictor.input_proj.w"];
        let (br, bc) = shapes["duration_predictor.input_proj.b"];
        assert_eq!(r * c + br * bc, cfg.d_model * cfg.d_duration + cfg.d_duration);
        assert_eq!(10 * 5 + 5, 55);
    }

    #[test]
    fn sra_minus_baseline_equals_conditioner_count() {
        let base = ModelConfig::paper(DurationPredictorVariant::Baseline);
        let sra_e = ModelConfig::paper(DurationPredictorVariant::SraE);
        let sra_b = ModelConfig::paper(DurationPredictorVariant::SraB);
        let delta_e = count_parameters(&sra_e) - count_parameters(&base);
        let delta_b = count_parameters(&sra_b) - count_parameters(&base);
        assert_eq!(delta_e, sr_conditioner_parameter_count(&sra_e));
        assert_eq!(delta_e, delta_b);
    }

    #[test]
    fn paper_config_count_near_published_total() {
        let cfg = ModelConfig::paper(DurationPredictorVariant::Baseline);
        let count = count_parameters(&cfg) as f64;
        let published = 45.14e6;
        assert!(
            (count - published).abs() / published < 0.05,
            "count {count} vs published {published}"
        );
    }

    #[test]
    fn init_is_deterministic_and_shared_across_variants() {
        let base_cfg = ModelConfig::toy(DurationPredictorVariant::Baseline);
        let sra_cfg = ModelConfig::toy(DurationPredictorVariant::SraE);
        let a = ModelParameters::init(&base_cfg, 5).unwrap();
        let b = ModelParameters::init(&base_cfg, 5).unwrap();
        assert_eq!(a, b);
        let s = ModelParameters::init(&sra_cfg, 5).unwrap();
        for (name, arr) in a.iter() {
            assert_eq!(arr, s.get(name), "shared parameter {name}");
        }
    }

    #[test]
    fn sr_value_and_output_projections_start_zero() {
        let cfg = ModelConfig::toy(DurationPredictorVariant::SraB);
        let p = ModelParameters::init(&cfg, 0).unwrap();
        for name in [
            "duration_predictor.sr.attn.wv",
            "duration_predictor.sr.attn.bv",
            "duration_predictor.sr.attn.wo",
            "duration_predictor.sr.attn.bo",
        ] {
            assert!(p.get(name).iter().all(|&x| x == 0.0), "{name}");
        }
        assert!(p
            .get("duration_predictor.sr.attn.wq")
            .iter()
            .any(|&x| x != 0.0));
    }

    #[test]
    fn every_parameter_has_a_group() {
        let cfg = ModelConfig::toy(DurationPredictorVariant::SraE);
        for name in parameter_shapes(&cfg).keys() {
            // Panics on unknown prefixes.
            let _ = param_group(name);
        }
        assert_eq!(param_group("duration_predictor.sr.proj.w"), ParamGroup::DurationPredictor);
        assert_eq!(param_group("encoder.token_embedding"), ParamGroup::Encoder);
        assert_eq!(param_group("decoder.mel_head.w"), ParamGroup::Decoder);
    }
}
