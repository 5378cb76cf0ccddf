//! Rate-controlled synthesis.
//!
//! Two control modes: `pace` multiplies the predictor's durations by the
//! factor (any variant); `sra` conditions the duration predictor on
//! `factor * base_sr` and uses its durations directly (SRA variants only).
//! In both modes `expected_sr = factor * base_sr` and `obtained_sr` is the
//! speaking rate recomputed from the produced frames.

mod vocoder;

pub use vocoder::{mel_filter_bank, vocode_griffin_lim, write_wav, DEFAULT_GRIFFIN_LIM_ITERS, DEFAULT_N_FFT};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::AudioFrameSpec;
use crate::model::{
    decode, encode, length_regulate, predict_durations, ModelError, ModelParameters,
};

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("sr_factor must be positive, got {0}")]
    NonPositiveFactor(f64),
    #[error("base speaking rate must be positive, got {0}")]
    NonPositiveBaseSr(f64),
    #[error("sra mode requires an SRA variant model")]
    ModeRequiresSraVariant,
    #[error("no base speaking rate available: provide one, a ground-truth rate, or a baseline model")]
    NoBaseSr,
    #[error("invalid mel basis: {0}")]
    InvalidMelBasis(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControlMode {
    Pace,
    Sra,
}

impl std::str::FromStr for ControlMode {
    type Err = SynthesisError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "pace" => Ok(Self::Pace),
            "sra" => Ok(Self::Sra),
            other => Err(SynthesisError::Model(ModelError::InvalidConfig(format!(
                "unknown control mode `{other}` (expected pace | sra)"
            )))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisRequest {
    pub tokens: Vec<u32>,
    pub speaker: usize,
    pub mode: ControlMode,
    pub sr_factor: f64,
    /// Base speaking rate in seconds per token. Resolution order: this field,
    /// then a ground-truth rate, then a baseline synthesis at factor 1.
    pub base_sr: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SynthesisResult {
    pub mel: Array2<f64>,
    pub durations_used: Vec<u32>,
    pub obtained_sr: f64,
    pub expected_sr: f64,
}

/// Duration-level outcome of rate control, before any mel decoding. The
/// real-valued durations support rounding-disabled diagnostics.
#[derive(Debug, Clone)]
pub struct RatePlan {
    /// Pre-rounding durations in frames (pace: already scaled by the factor).
    pub real_durations: Vec<f64>,
    /// Rounded, clamped-to-one durations actually used for synthesis.
    pub durations: Vec<u32>,
    pub expected_sr: f64,
    /// Eq.-1 rate of the rounded plan.
    pub obtained_sr: f64,
    /// Eq.-1 rate of the real-valued plan (rounding disabled).
    pub obtained_sr_real: f64,
}

/// Base-SR resolution: explicit request value, else the ground-truth rate,
/// else a baseline-model synthesis at factor 1.
pub fn resolve_base_sr(
    request: &SynthesisRequest,
    ground_truth_sr: Option<f64>,
    baseline: Option<&ModelParameters>,
    spec: &AudioFrameSpec,
) -> Result<f64, SynthesisError> {
    if let Some(sr) = request.base_sr {
        if !(sr > 0.0) {
            return Err(SynthesisError::NonPositiveBaseSr(sr));
        }
        return Ok(sr);
    }
    if let Some(sr) = ground_truth_sr {
        if !(sr > 0.0) {
            return Err(SynthesisError::NonPositiveBaseSr(sr));
        }
        return Ok(sr);
    }
    if let Some(params) = baseline {
        if params.config().variant.requires_speaking_rate() {
            return Err(SynthesisError::ModeRequiresSraVariant);
        }
        let enc = encode(&request.tokens, request.speaker, params)?;
        let real = predict_durations(&enc, None, params)?;
        let durations = pace_control_durations(&real, 1.0);
        let total: u64 = durations.iter().map(|&d| d as u64).sum();
        return Ok(spec.seconds(total as usize) / request.tokens.len() as f64);
    }
    Err(SynthesisError::NoBaseSr)
}

/// Pace control: `max(1, round(factor * d))`, rounding half away from zero.
pub fn pace_control_durations(predicted: &[f64], factor: f64) -> Vec<u32> {
    predicted
        .iter()
        .map(|&d| {
            let scaled = (factor * d).round();
            (scaled as i64).max(1) as u32
        })
        .collect()
}

/// Rate-control the duration predictor without decoding a mel.
pub fn plan_durations(
    params: &ModelParameters,
    request: &SynthesisRequest,
    spec: &AudioFrameSpec,
) -> Result<RatePlan, SynthesisError> {
    if !(request.sr_factor > 0.0) {
        return Err(SynthesisError::NonPositiveFactor(request.sr_factor));
    }
    let variant = params.config().variant;
    let needs_sr = variant.requires_speaking_rate();
    let enc = encode(&request.tokens, request.speaker, params)?;
    let factor = request.sr_factor;

    let resolved_base = match request.base_sr {
        Some(sr) if sr > 0.0 => Some(sr),
        Some(sr) => return Err(SynthesisError::NonPositiveBaseSr(sr)),
        None => None,
    };

    let (real_durations, durations, base_sr) = match request.mode {
        ControlMode::Pace => {
            // Training-time conditioning: none for the baseline, base_sr for
            // SRA variants; the factor then scales the predicted durations.
            let conditioning = if needs_sr {
                Some(resolved_base.ok_or(SynthesisError::NoBaseSr)?)
            } else {
                None
            };
            let predicted = predict_durations(&enc, conditioning, params)?;
            let scaled: Vec<f64> = predicted.iter().map(|&d| d * factor).collect();
            let rounded = pace_control_durations(&predicted, factor);
            let base = match resolved_base {
                Some(b) => b,
                // Self-resolution: the unscaled rounded plan at factor 1.
                None => {
                    let at_unity = pace_control_durations(&predicted, 1.0);
                    let total: u64 = at_unity.iter().map(|&d| d as u64).sum();
                    spec.seconds(total as usize) / request.tokens.len() as f64
                }
            };
            (scaled, rounded, base)
        }
        ControlMode::Sra => {
            if !needs_sr {
                return Err(SynthesisError::ModeRequiresSraVariant);
            }
            let base = resolved_base.ok_or(SynthesisError::NoBaseSr)?;
            let conditioned_sr = factor * base;
            let predicted = predict_durations(&enc, Some(conditioned_sr), params)?;
            let rounded = pace_control_durations(&predicted, 1.0);
            (predicted, rounded, base)
        }
    };

    let t = request.tokens.len() as f64;
    let total_rounded: u64 = durations.iter().map(|&d| d as u64).sum();
    let total_real: f64 = real_durations.iter().sum();
    Ok(RatePlan {
        expected_sr: factor * base_sr,
        obtained_sr: spec.seconds(total_rounded as usize) / t,
        obtained_sr_real: total_real * spec.seconds_per_frame() / t,
        real_durations,
        durations,
    })
}

/// Full synthesis: rate-controlled durations, length regulation, decoding.
pub fn synthesize(
    params: &ModelParameters,
    request: &SynthesisRequest,
    spec: &AudioFrameSpec,
) -> Result<SynthesisResult, SynthesisError> {
    let plan = plan_durations(params, request, spec)?;
    let enc = encode(&request.tokens, request.speaker, params)?;
    let frames = length_regulate(&enc, &plan.durations)?;
    let mel = decode(&frames, params)?;
    Ok(SynthesisResult {
        mel,
        durations_used: plan.durations,
        obtained_sr: plan.obtained_sr,
        expected_sr: plan.expected_sr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DurationPredictorVariant, ModelConfig};

    fn spec() -> AudioFrameSpec {
        AudioFrameSpec::new(22050, 256, 6)
    }

    fn sra_params() -> ModelParameters {
        let cfg = ModelConfig::toy(DurationPredictorVariant::SraE);
        let mut params = ModelParameters::init(&cfg, 21).unwrap();
        // Push predicted durations up to ~6 frames so rounding never clamps.
        params.get_mut("duration_predictor.out_proj.b")[(0, 0)] = 2.0;
        params
    }

    fn baseline_params() -> ModelParameters {
        let cfg = ModelConfig::toy(DurationPredictorVariant::Baseline);
        let mut params = ModelParameters::init(&cfg, 21).unwrap();
        params.get_mut("duration_predictor.out_proj.b")[(0, 0)] = 2.0;
        params
    }

    fn request(mode: ControlMode, factor: f64, base: Option<f64>) -> SynthesisRequest {
        SynthesisRequest {
            tokens: vec![1, 4, 2, 7, 3],
            speaker: 0,
            mode,
            sr_factor: factor,
            base_sr: base,
        }
    }

    #[test]
    fn pace_control_trivia() {
        assert_eq!(pace_control_durations(&[4.0, 2.0, 6.0], 0.5), vec![2, 1, 3]);
        assert_eq!(pace_control_durations(&[3.0, 1.0], 1.0), vec![3, 1]);
        assert_eq!(pace_control_durations(&[0.4], 1.0), vec![1]);
    }

    #[test]
    fn resolve_base_sr_precedence() {
        let req = request(ControlMode::Sra, 1.2, Some(0.1));
        assert_eq!(resolve_base_sr(&req, Some(0.5), None, &spec()).unwrap(), 0.1);
        let req = request(ControlMode::Sra, 1.2, None);
        assert_eq!(resolve_base_sr(&req, Some(0.5), None, &spec()).unwrap(), 0.5);
        assert!(matches!(
            resolve_base_sr(&req, None, None, &spec()).unwrap_err(),
            SynthesisError::NoBaseSr
        ));

        let baseline = baseline_params();
        let resolved = resolve_base_sr(&req, None, Some(&baseline), &spec()).unwrap();
        // Must equal Eq. 1 applied to the baseline's factor-1 durations.
        let enc = encode(&req.tokens, req.speaker, &baseline).unwrap();
        let durations =
            pace_control_durations(&predict_durations(&enc, None, &baseline).unwrap(), 1.0);
        let total: u64 = durations.iter().map(|&d| d as u64).sum();
        let expected = spec().seconds(total as usize) / req.tokens.len() as f64;
        assert_eq!(resolved, expected);
    }

    #[test]
    fn sra_mode_on_baseline_is_an_error() {
        let params = baseline_params();
        let req = request(ControlMode::Sra, 1.0, Some(0.1));
        assert!(matches!(
            plan_durations(&params, &req, &spec()).unwrap_err(),
            SynthesisError::ModeRequiresSraVariant
        ));
    }

    #[test]
    fn pace_real_durations_scale_exactly_by_factor() {
        let params = sra_params();
        let base = request(ControlMode::Pace, 1.0, Some(0.1));
        let at1 = plan_durations(&params, &base, &spec()).unwrap();
        for factor in [0.54, 0.77, 1.23, 1.46] {
            let req = request(ControlMode::Pace, factor, Some(0.1));
            let plan = plan_durations(&params, &req, &spec()).unwrap();
            for (a, b) in plan.real_durations.iter().zip(&at1.real_durations) {
                assert!((a - factor * b).abs() < 1e-12);
            }
            let rel = (plan.obtained_sr_real - factor * at1.obtained_sr_real).abs()
                / plan.obtained_sr_real;
            assert!(rel < 1e-12);
        }
    }

    #[test]
    fn pace_rounding_deviation_bounded_by_half_frame_per_token() {
        let params = sra_params();
        for factor in [0.54, 0.89, 1.11, 1.46] {
            let req = request(ControlMode::Pace, factor, Some(0.1));
            let plan = plan_durations(&params, &req, &spec()).unwrap();
            let bound = 0.5 * spec().seconds_per_frame();
            assert!(
                (plan.obtained_sr - plan.obtained_sr_real).abs() <= bound + 1e-12,
                "factor {factor}"
            );
        }
    }

    #[test]
    fn sra_mode_depends_only_on_conditioned_product() {
        // Two (factor, base) pairs with equal products give identical
        // durations; the post-hoc scaling path is never taken in sra mode.
        let params = sra_params();
        let a = plan_durations(
            &params,
            &request(ControlMode::Sra, 1.2, Some(0.1)),
            &spec(),
        )
        .unwrap();
        let b = plan_durations(
            &params,
            &request(ControlMode::Sra, 0.6, Some(0.2)),
            &spec(),
        )
        .unwrap();
        assert_eq!(a.durations, b.durations);
        assert_eq!(a.real_durations, b.real_durations);
    }

    #[test]
    fn sra_factor_one_matches_conditioned_prediction() {
        let params = sra_params();
        let req = request(ControlMode::Sra, 1.0, Some(0.11));
        let plan = plan_durations(&params, &req, &spec()).unwrap();
        let enc = encode(&req.tokens, req.speaker, &params).unwrap();
        let predicted = predict_durations(&enc, Some(0.11), &params).unwrap();
        assert_eq!(plan.durations, pace_control_durations(&predicted, 1.0));
        assert_eq!(plan.expected_sr, 0.11);
    }

    #[test]
    fn synthesize_result_is_self_consistent() {
        let params = sra_params();
        let req = request(ControlMode::Sra, 1.3, Some(0.09));
        let result = synthesize(&params, &req, &spec()).unwrap();
        let total: u64 = result.durations_used.iter().map(|&d| d as u64).sum();
        assert_eq!(result.mel.nrows(), total as usize);
        assert_eq!(result.mel.ncols(), params.config().n_mels);
        let eq1 = spec().seconds(total as usize) / req.tokens.len() as f64;
        assert_eq!(result.obtained_sr, eq1);
        assert!((result.expected_sr - 1.3 * 0.09).abs() < 1e-15);
    }

    #[test]
    fn invalid_factors_rejected() {
        let params = sra_params();
        let req = request(ControlMode::Sra, 0.0, Some(0.1));
        assert!(matches!(
            plan_durations(&params, &req, &spec()).unwrap_err(),
            SynthesisError::NonPositiveFactor(_)
        ));
        let req = request(ControlMode::Sra, 1.0, Some(-0.1));
        assert!(matches!(
            plan_durations(&params, &req, &spec()).unwrap_err(),
            SynthesisError::NonPositiveBaseSr(_)
        ));
    }
}
