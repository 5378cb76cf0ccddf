//! Forward passes. Every composite returns a trace holding the activations
//! its backward needs; inference callers drop the trace.

use ndarray::{Array1, Array2, Axis};

use super::layers::{
    affine_forward, conv1d_forward, cross_attention_forward, layer_norm_forward,
    positional_encoding, relu_forward, self_attention_forward, AttentionParams,
    CrossAttentionCache, LayerNormCache, SelfAttentionCache,
};
use super::{DurationPredictorVariant, ModelError, ModelParameters, DURATION_FLOOR};
use crate::corpus::UtteranceRecord;

/// Hook points inside the duration predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DurationStage {
    /// Projected encoder output, before the conv stack.
    Pre,
    /// After both conv+relu+layernorm blocks, before the final dense layer.
    Post,
}

pub(crate) fn attention_params<'a>(p: &'a ModelParameters, prefix: &str) -> AttentionParams<'a> {
    AttentionParams {
        wq: p.get(&format!("{prefix}.wq")),
        bq: p.get(&format!("{prefix}.bq")),
        wk: p.get(&format!("{prefix}.wk")),
        bk: p.get(&format!("{prefix}.bk")),
        wv: p.get(&format!("{prefix}.wv")),
        bv: p.get(&format!("{prefix}.bv")),
        wo: p.get(&format!("{prefix}.wo")),
        bo: p.get(&format!("{prefix}.bo")),
    }
}

// ---------------------------------------------------------------------------
// Transformer block
// ---------------------------------------------------------------------------

pub(crate) struct BlockTrace {
    pub x_in: Array2<f64>,
    pub attn: SelfAttentionCache,
    pub ln1: LayerNormCache,
    pub y1: Array2<f64>,
    /// conv1 output before relu.
    pub c1: Array2<f64>,
    /// relu(c1), input to conv2.
    pub h: Array2<f64>,
    pub ln2: LayerNormCache,
}

pub(crate) fn transformer_block_forward(
    x: &Array2<f64>,
    params: &ModelParameters,
    prefix: &str,
) -> (Array2<f64>, BlockTrace) {
    let cfg = params.config();
    let attn_p = attention_params(params, &format!("{prefix}.attn"));
    let (attn_out, attn_cache) = self_attention_forward(x, &attn_p, cfg.n_heads, cfg.d_attn);
    let r1 = x + &attn_out;
    let (y1, ln1) = layer_norm_forward(
        &r1,
        params.get(&format!("{prefix}.ln1.gamma")),
        params.get(&format!("{prefix}.ln1.beta")),
    );
    let c1 = conv1d_forward(
        &y1,
        params.get(&format!("{prefix}.ffn.conv1.w")),
        params.get(&format!("{prefix}.ffn.conv1.b")),
    );
    let h = relu_forward(&c1);
    let c2 = conv1d_forward(
        &h,
        params.get(&format!("{prefix}.ffn.conv2.w")),
        params.get(&format!("{prefix}.ffn.conv2.b")),
    );
    let r2 = &y1 + &c2;
    let (y2, ln2) = layer_norm_forward(
        &r2,
        params.get(&format!("{prefix}.ln2.gamma")),
        params.get(&format!("{prefix}.ln2.beta")),
    );
    (y2, BlockTrace {
        x_in: x.clone(),
        attn: attn_cache,
        ln1,
        y1,
        c1,
        h,
        ln2,
    })
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

pub struct EncodeTrace {
    pub(crate) tokens: Vec<u32>,
    pub(crate) speaker: usize,
    pub(crate) blocks: Vec<BlockTrace>,
    pub(crate) output: Array2<f64>,
}

pub(crate) fn encode_with_trace(
    tokens: &[u32],
    speaker: usize,
    params: &ModelParameters,
) -> Result<EncodeTrace, ModelError> {
    let cfg = params.config();
    if tokens.is_empty() {
        return Err(ModelError::ShapeMismatch("empty token sequence".into()));
    }
    for (position, &token) in tokens.iter().enumerate() {
        if token as usize >= cfg.vocab_size {
            return Err(ModelError::TokenOutOfRange {
                position,
                token,
                vocab: cfg.vocab_size,
            });
        }
    }
    if speaker >= cfg.n_speakers {
        return Err(ModelError::SpeakerOutOfRange(speaker, cfg.n_speakers));
    }
    let embedding = params.get("encoder.token_embedding");
    let t = tokens.len();
    let mut x = Array2::zeros((t, cfg.d_model));
    for (row, &token) in tokens.iter().enumerate() {
        x.row_mut(row).assign(&embedding.row(token as usize));
    }
    x += &positional_encoding(t, cfg.d_model);

    let mut blocks = Vec::with_capacity(cfg.n_encoder_layers);
    for i in 0..cfg.n_encoder_layers {
        let (y, trace) = transformer_block_forward(&x, params, &format!("encoder.layer{i}"));
        blocks.push(trace);
        x = y;
    }
    // Multi-speaker conditioning: learned speaker embedding added to the
    // encoder output.
    let speaker_row = params.get("encoder.speaker_embedding").row(speaker).to_owned();
    for mut row in x.rows_mut() {
        row += &speaker_row;
    }
    Ok(EncodeTrace {
        tokens: tokens.to_vec(),
        speaker,
        blocks,
        output: x,
    })
}

/// Token + positional embedding through the encoder stack, with the speaker
/// embedding added to the output. Shape `T x d_model`.
pub fn encode(
    tokens: &[u32],
    speaker: usize,
    params: &ModelParameters,
) -> Result<Array2<f64>, ModelError> {
    Ok(encode_with_trace(tokens, speaker, params)?.output)
}

// ---------------------------------------------------------------------------
// Speaking-rate conditioner
// ---------------------------------------------------------------------------

/// Result of the SR cross-attention (before the conditioner's layer norm).
pub struct SrAttentionOutput {
    /// `duration_feats + out_proj(context)`.
    pub output: Array2<f64>,
    /// Per-position attention context (pre-residual); rows are identical
    /// because the key set is the single SR token.
    pub context: Array2<f64>,
}

/// Affine embedding of the scalar speaking rate into `d_duration` dims.
pub fn sr_embed(sr: f64, params: &ModelParameters) -> Result<Array1<f64>, ModelError> {
    if !(sr > 0.0) {
        return Err(ModelError::NonPositiveSpeakingRate(sr));
    }
    let w = params.get("duration_predictor.sr.proj.w");
    let b = params.get("duration_predictor.sr.proj.b");
    let sr_mat = Array2::from_elem((1, 1), sr);
    Ok(affine_forward(&sr_mat, w, b).remove_axis(Axis(0)))
}

/// Cross-attention with query from duration features and key/value from the
/// SR embedding; output is the residual sum `duration_feats + proj(context)`.
pub fn sr_attention(
    duration_feats: &Array2<f64>,
    sr_feats: &Array1<f64>,
    params: &ModelParameters,
) -> Result<SrAttentionOutput, ModelError> {
    let cfg = params.config();
    if duration_feats.ncols() != cfg.d_duration || sr_feats.len() != cfg.d_duration {
        return Err(ModelError::ShapeMismatch(format!(
            "duration feats {:?} / sr feats {} vs d_duration {}",
            duration_feats.dim(),
            sr_feats.len(),
            cfg.d_duration
        )));
    }
    let cond = sr_feats.clone().insert_axis(Axis(0));
    let p = attention_params(params, "duration_predictor.sr.attn");
    let (output, cache) = cross_attention_forward(duration_feats, &cond, &p, cfg.d_attn);
    Ok(SrAttentionOutput {
        output,
        context: cache.context,
    })
}

pub(crate) struct SrBlockTrace {
    pub x_in: Array2<f64>,
    pub sr: f64,
    pub sr_feats: Array2<f64>,
    pub cross: CrossAttentionCache,
    pub ln: LayerNormCache,
}

/// Full conditioner block: cross-attention, residual, layer norm.
fn sr_block_forward(
    x: &Array2<f64>,
    sr: f64,
    params: &ModelParameters,
) -> Result<(Array2<f64>, SrBlockTrace), ModelError> {
    if !(sr > 0.0) {
        return Err(ModelError::NonPositiveSpeakingRate(sr));
    }
    let cfg = params.config();
    let sr_mat = Array2::from_elem((1, 1), sr);
    let sr_feats = affine_forward(
        &sr_mat,
        params.get("duration_predictor.sr.proj.w"),
        params.get("duration_predictor.sr.proj.b"),
    );
    let p = attention_params(params, "duration_predictor.sr.attn");
    let (residual, cross) = cross_attention_forward(x, &sr_feats, &p, cfg.d_attn);
    let (y, ln) = layer_norm_forward(
        &residual,
        params.get("duration_predictor.sr.ln.gamma"),
        params.get("duration_predictor.sr.ln.beta"),
    );
    Ok((y, SrBlockTrace {
        x_in: x.clone(),
        sr,
        sr_feats,
        cross,
        ln,
    }))
}

// ---------------------------------------------------------------------------
// Duration predictor
// ---------------------------------------------------------------------------

pub(crate) struct DurationTrace {
    pub enc_out: Array2<f64>,
    pub sr_pre: Option<SrBlockTrace>,
    /// Input to conv1: the projected "pre" features, conditioned first under
    /// SRA-b.
    pub conv1_in: Array2<f64>,
    pub c1: Array2<f64>,
    pub ln1: LayerNormCache,
    pub h1: Array2<f64>,
    pub c2: Array2<f64>,
    pub ln2: LayerNormCache,
    pub sr_post: Option<SrBlockTrace>,
    /// Input to the final dense layer: the "post" features, conditioned
    /// first under SRA-e.
    pub dense_in: Array2<f64>,
}

pub(crate) fn duration_predictor_forward(
    enc_out: &Array2<f64>,
    sr: Option<f64>,
    params: &ModelParameters,
) -> Result<(Array2<f64>, DurationTrace), ModelError> {
    let cfg = params.config();
    if enc_out.ncols() != cfg.d_model {
        return Err(ModelError::ShapeMismatch(format!(
            "encoder output width {} vs d_model {}",
            enc_out.ncols(),
            cfg.d_model
        )));
    }
    match (cfg.variant, sr) {
        (DurationPredictorVariant::Baseline, Some(_)) => {
            return Err(ModelError::VariantMismatch(
                "baseline duration predictor takes no speaking rate".into(),
            ))
        }
        (v, None) if v.requires_speaking_rate() => {
            return Err(ModelError::VariantMismatch(format!(
                "{} duration predictor requires a speaking rate",
                v.label()
            )))
        }
        _ => {}
    }

    let pre = affine_forward(
        enc_out,
        params.get("duration_predictor.input_proj.w"),
        params.get("duration_predictor.input_proj.b"),
    );
    let (conv1_in, sr_pre) = if cfg.variant == DurationPredictorVariant::SraB {
        let (y, trace) = sr_block_forward(&pre, sr.expect("validated"), params)?;
        (y, Some(trace))
    } else {
        (pre.clone(), None)
    };
    let c1 = conv1d_forward(
        &conv1_in,
        params.get("duration_predictor.conv1.w"),
        params.get("duration_predictor.conv1.b"),
    );
    let rel1 = relu_forward(&c1);
    let (h1, ln1) = layer_norm_forward(
        &rel1,
        params.get("duration_predictor.ln1.gamma"),
        params.get("duration_predictor.ln1.beta"),
    );
    let c2 = conv1d_forward(
        &h1,
        params.get("duration_predictor.conv2.w"),
        params.get("duration_predictor.conv2.b"),
    );
    let rel2 = relu_forward(&c2);
    let (h2, ln2) = layer_norm_forward(
        &rel2,
        params.get("duration_predictor.ln2.gamma"),
        params.get("duration_predictor.ln2.beta"),
    );
    let (dense_in, sr_post) = if cfg.variant == DurationPredictorVariant::SraE {
        let (y, trace) = sr_block_forward(&h2, sr.expect("validated"), params)?;
        (y, Some(trace))
    } else {
        (h2.clone(), None)
    };
    let log_durations = affine_forward(
        &dense_in,
        params.get("duration_predictor.out_proj.w"),
        params.get("duration_predictor.out_proj.b"),
    );
    Ok((log_durations, DurationTrace {
        enc_out: enc_out.clone(),
        sr_pre,
        conv1_in,
        c1,
        ln1,
        h1,
        c2,
        ln2,
        sr_post,
        dense_in,
    }))
}

/// Unconditioned duration-predictor features at a hook point, `T x d_duration`.
pub fn duration_features(
    enc_out: &Array2<f64>,
    params: &ModelParameters,
    stage: DurationStage,
) -> Result<Array2<f64>, ModelError> {
    let cfg = params.config();
    if enc_out.ncols() != cfg.d_model {
        return Err(ModelError::ShapeMismatch(format!(
            "encoder output width {} vs d_model {}",
            enc_out.ncols(),
            cfg.d_model
        )));
    }
    let pre = affine_forward(
        enc_out,
        params.get("duration_predictor.input_proj.w"),
        params.get("duration_predictor.input_proj.b"),
    );
    if stage == DurationStage::Pre {
        return Ok(pre);
    }
    let c1 = conv1d_forward(
        &pre,
        params.get("duration_predictor.conv1.w"),
        params.get("duration_predictor.conv1.b"),
    );
    let (h1, _) = layer_norm_forward(
        &relu_forward(&c1),
        params.get("duration_predictor.ln1.gamma"),
        params.get("duration_predictor.ln1.beta"),
    );
    let c2 = conv1d_forward(
        &h1,
        params.get("duration_predictor.conv2.w"),
        params.get("duration_predictor.conv2.b"),
    );
    let (h2, _) = layer_norm_forward(
        &relu_forward(&c2),
        params.get("duration_predictor.ln2.gamma"),
        params.get("duration_predictor.ln2.beta"),
    );
    Ok(h2)
}

/// Per-token durations in frames: strictly positive reals, decoded from the
/// predicted log-durations as `max(exp(x) - 1, floor)` to match the
/// `log(d + 1)` training target.
pub fn predict_durations(
    enc_out: &Array2<f64>,
    sr: Option<f64>,
    params: &ModelParameters,
) -> Result<Vec<f64>, ModelError> {
    let (logd, _) = duration_predictor_forward(enc_out, sr, params)?;
    Ok(logd
        .column(0)
        .iter()
        .map(|&x| (x.exp() - 1.0).max(DURATION_FLOOR))
        .collect())
}

// ---------------------------------------------------------------------------
// Length regulator
// ---------------------------------------------------------------------------

/// Repeat row `i` of `encoder_out` `durations[i]` times, order preserved.
pub fn length_regulate(
    encoder_out: &Array2<f64>,
    durations: &[u32],
) -> Result<Array2<f64>, ModelError> {
    if encoder_out.nrows() != durations.len() {
        return Err(ModelError::ShapeMismatch(format!(
            "{} encoder rows vs {} durations",
            encoder_out.nrows(),
            durations.len()
        )));
    }
    let total: usize = durations.iter().map(|&d| d as usize).sum();
    if total == 0 {
        return Err(ModelError::AllZeroDurations);
    }
    let mut out = Array2::zeros((total, encoder_out.ncols()));
    let mut row = 0;
    for (i, &d) in durations.iter().enumerate() {
        for _ in 0..d {
            out.row_mut(row).assign(&encoder_out.row(i));
            row += 1;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Decoder
// ---------------------------------------------------------------------------

pub struct DecodeTrace {
    pub(crate) blocks: Vec<BlockTrace>,
    pub(crate) final_hidden: Array2<f64>,
    pub(crate) output: Array2<f64>,
}

pub(crate) fn decode_with_trace(
    frames: &Array2<f64>,
    params: &ModelParameters,
) -> Result<DecodeTrace, ModelError> {
    let cfg = params.config();
    let n = frames.nrows();
    if n == 0 {
        return Err(ModelError::ShapeMismatch("empty frame sequence".into()));
    }
    if frames.ncols() != cfg.d_model {
        return Err(ModelError::ShapeMismatch(format!(
            "frame width {} vs d_model {}",
            frames.ncols(),
            cfg.d_model
        )));
    }
    if n > cfg.max_frames {
        return Err(ModelError::PositionalHorizon {
            frames: n,
            max_frames: cfg.max_frames,
        });
    }
    let mut x = frames + &positional_encoding(n, cfg.d_model);
    let mut blocks = Vec::with_capacity(cfg.n_decoder_layers);
    for i in 0..cfg.n_decoder_layers {
        let (y, trace) = transformer_block_forward(&x, params, &format!("decoder.layer{i}"));
        blocks.push(trace);
        x = y;
    }
    let mel = affine_forward(
        &x,
        params.get("decoder.mel_head.w"),
        params.get("decoder.mel_head.b"),
    );
    Ok(DecodeTrace {
        blocks,
        final_hidden: x,
        output: mel,
    })
}

/// Frame features through the decoder stack to mel frames, `N x n_mels`.
pub fn decode(frames: &Array2<f64>, params: &ModelParameters) -> Result<Array2<f64>, ModelError> {
    Ok(decode_with_trace(frames, params)?.output)
}

// ---------------------------------------------------------------------------
// Teacher-forced training pass
// ---------------------------------------------------------------------------

pub struct TrainTrace {
    pub(crate) encode: EncodeTrace,
    pub(crate) duration: DurationTrace,
    pub(crate) durations_gt: Vec<u32>,
    pub(crate) decode: DecodeTrace,
}

pub struct ForwardTrainOutput {
    /// Predicted mel, exactly `sum(durations)` frames.
    pub mel: Array2<f64>,
    /// Predicted log-durations, one per token (for the duration loss).
    pub log_durations: Array1<f64>,
    pub trace: TrainTrace,
}

/// Teacher-forced forward pass: upsampling always uses the record's ground
/// truth durations; SRA variants are conditioned on the record's own
/// speaking rate.
pub fn forward_train(
    record: &UtteranceRecord,
    speaker: usize,
    params: &ModelParameters,
) -> Result<ForwardTrainOutput, ModelError> {
    let cfg = params.config();
    let encode = encode_with_trace(&record.tokens, speaker, params)?;
    let sr = if cfg.variant.requires_speaking_rate() {
        Some(record.speaking_rate)
    } else {
        None
    };
    let (logd, duration) = duration_predictor_forward(&encode.output, sr, params)?;
    let upsampled = length_regulate(&encode.output, &record.durations)?;
    let decode = decode_with_trace(&upsampled, params)?;
    Ok(ForwardTrainOutput {
        mel: decode.output.clone(),
        log_durations: logd.column(0).to_owned(),
        trace: TrainTrace {
            encode,
            duration,
            durations_gt: record.durations.clone(),
            decode,
        },
    })
}
