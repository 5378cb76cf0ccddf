//! Reverse-mode pass mirroring [`super::forward`]. Parameter gradients are
//! accumulated into a [`Gradients`] store keyed by parameter path.

use ndarray::{Array1, Array2, Axis};

use super::forward::{attention_params, BlockTrace, DurationTrace, SrBlockTrace, TrainTrace};
use super::layers::{
    affine_backward, conv1d_backward, cross_attention_backward, layer_norm_backward,
    relu_backward, self_attention_backward, sum_rows, AttentionGrads,
};
use super::params::Gradients;
use super::ModelParameters;

fn add_attention_grads(grads: &mut Gradients, prefix: &str, g: AttentionGrads) {
    grads.add(&format!("{prefix}.wq"), g.dwq);
    grads.add(&format!("{prefix}.bq"), g.dbq);
    grads.add(&format!("{prefix}.wk"), g.dwk);
    grads.add(&format!("{prefix}.bk"), g.dbk);
    grads.add(&format!("{prefix}.wv"), g.dwv);
    grads.add(&format!("{prefix}.bv"), g.dbv);
    grads.add(&format!("{prefix}.wo"), g.dwo);
    grads.add(&format!("{prefix}.bo"), g.dbo);
}

fn transformer_block_backward(
    params: &ModelParameters,
    prefix: &str,
    trace: &BlockTrace,
    dy: &Array2<f64>,
    grads: &mut Gradients,
) -> Array2<f64> {
    let (dr2, dgamma2, dbeta2) = layer_norm_backward(
        &trace.ln2,
        params.get(&format!("{prefix}.ln2.gamma")),
        dy,
    );
    grads.add(&format!("{prefix}.ln2.gamma"), dgamma2);
    grads.add(&format!("{prefix}.ln2.beta"), dbeta2);

    let mut dy1 = dr2.clone();
    let (dh, dw2, db2) = conv1d_backward(
        &trace.h,
        params.get(&format!("{prefix}.ffn.conv2.w")),
        &dr2,
    );
    grads.add(&format!("{prefix}.ffn.conv2.w"), dw2);
    grads.add(&format!("{prefix}.ffn.conv2.b"), db2);
    let dc1 = relu_backward(&trace.c1, &dh);
    let (dy1_ffn, dw1, db1) = conv1d_backward(
        &trace.y1,
        params.get(&format!("{prefix}.ffn.conv1.w")),
        &dc1,
    );
    grads.add(&format!("{prefix}.ffn.conv1.w"), dw1);
    grads.add(&format!("{prefix}.ffn.conv1.b"), db1);
    dy1 += &dy1_ffn;

    let (dr1, dgamma1, dbeta1) = layer_norm_backward(
        &trace.ln1,
        params.get(&format!("{prefix}.ln1.gamma")),
        &dy1,
    );
    grads.add(&format!("{prefix}.ln1.gamma"), dgamma1);
    grads.add(&format!("{prefix}.ln1.beta"), dbeta1);

    let attn_prefix = format!("{prefix}.attn");
    let attn_p = attention_params(params, &attn_prefix);
    let (dx_attn, attn_grads) =
        self_attention_backward(&trace.x_in, &attn_p, &trace.attn, &dr1);
    add_attention_grads(grads, &attn_prefix, attn_grads);
    dr1 + dx_attn
}

fn sr_block_backward(
    params: &ModelParameters,
    trace: &SrBlockTrace,
    dy: &Array2<f64>,
    grads: &mut Gradients,
) -> Array2<f64> {
    let cfg = params.config();
    let (dres, dgamma, dbeta) = layer_norm_backward(
        &trace.ln,
        params.get("duration_predictor.sr.ln.gamma"),
        dy,
    );
    grads.add("duration_predictor.sr.ln.gamma", dgamma);
    grads.add("duration_predictor.sr.ln.beta", dbeta);

    let p = attention_params(params, "duration_predictor.sr.attn");
    let (dx, dcond, attn_grads) = cross_attention_backward(
        &trace.x_in,
        &trace.sr_feats,
        &p,
        &trace.cross,
        &dres,
        cfg.d_attn,
    );
    add_attention_grads(grads, "duration_predictor.sr.attn", attn_grads);

    let sr_mat = Array2::from_elem((1, 1), trace.sr);
    let (_, dproj_w, dproj_b) = affine_backward(
        &sr_mat,
        params.get("duration_predictor.sr.proj.w"),
        &dcond,
    );
    grads.add("duration_predictor.sr.proj.w", dproj_w);
    grads.add("duration_predictor.sr.proj.b", dproj_b);
    dx
}

fn duration_predictor_backward(
    params: &ModelParameters,
    trace: &DurationTrace,
    dlogd: &Array1<f64>,
    grads: &mut Gradients,
) -> Array2<f64> {
    let dld = dlogd.clone().insert_axis(Axis(1));
    let (ddense_in, dow, dob) = affine_backward(
        &trace.dense_in,
        params.get("duration_predictor.out_proj.w"),
        &dld,
    );
    grads.add("duration_predictor.out_proj.w", dow);
    grads.add("duration_predictor.out_proj.b", dob);

    let dh2 = match &trace.sr_post {
        Some(sr_trace) => sr_block_backward(params, sr_trace, &ddense_in, grads),
        None => ddense_in,
    };
    let (drel2, dgamma2, dbeta2) = layer_norm_backward(
        &trace.ln2,
        params.get("duration_predictor.ln2.gamma"),
        &dh2,
    );
    grads.add("duration_predictor.ln2.gamma", dgamma2);
    grads.add("duration_predictor.ln2.beta", dbeta2);
    let dc2 = relu_backward(&trace.c2, &drel2);
    let (dh1, dw2, db2) = conv1d_backward(
        &trace.h1,
        params.get("duration_predictor.conv2.w"),
        &dc2,
    );
    grads.add("duration_predictor.conv2.w", dw2);
    grads.add("duration_predictor.conv2.b", db2);

    let (drel1, dgamma1, dbeta1) = layer_norm_backward(
        &trace.ln1,
        params.get("duration_predictor.ln1.gamma"),
        &dh1,
    );
    grads.add("duration_predictor.ln1.gamma", dgamma1);
    grads.add("duration_predictor.ln1.beta", dbeta1);
    let dc1 = relu_backward(&trace.c1, &drel1);
    let (dconv1_in, dw1, db1) = conv1d_backward(
        &trace.conv1_in,
        params.get("duration_predictor.conv1.w"),
        &dc1,
    );
    grads.add("duration_predictor.conv1.w", dw1);
    grads.add("duration_predictor.conv1.b", db1);

    let dpre = match &trace.sr_pre {
        Some(sr_trace) => sr_block_backward(params, sr_trace, &dconv1_in, grads),
        None => dconv1_in,
    };
    let (denc, dip_w, dip_b) = affine_backward(
        &trace.enc_out,
        params.get("duration_predictor.input_proj.w"),
        &dpre,
    );
    grads.add("duration_predictor.input_proj.w", dip_w);
    grads.add("duration_predictor.input_proj.b", dip_b);
    denc
}

/// Gradient of a scalar loss w.r.t. every parameter, given the loss gradients
/// at the two model outputs (`dmel` for the predicted mel, `dlogd` for the
/// predicted log-durations).
pub fn backward_train(
    params: &ModelParameters,
    trace: &TrainTrace,
    dmel: &Array2<f64>,
    dlogd: &Array1<f64>,
) -> Gradients {
    let cfg = params.config();
    let mut grads = Gradients::zeros_like(params);

    // Decoder: mel head, blocks, positional add (no parameters).
    let (mut dframes, dmel_w, dmel_b) = affine_backward(
        &trace.decode.final_hidden,
        params.get("decoder.mel_head.w"),
        dmel,
    );
    grads.add("decoder.mel_head.w", dmel_w);
    grads.add("decoder.mel_head.b", dmel_b);
    for (i, block) in trace.decode.blocks.iter().enumerate().rev() {
        dframes =
            transformer_block_backward(params, &format!("decoder.layer{i}"), block, &dframes, &mut grads);
    }

    // Length regulator: each encoder row collects the gradients of its copies.
    let t = trace.encode.output.nrows();
    let mut denc = Array2::zeros((t, cfg.d_model));
    let mut frame = 0;
    for (i, &d) in trace.durations_gt.iter().enumerate() {
        for _ in 0..d {
            let src = dframes.row(frame);
            let mut dst = denc.row_mut(i);
            dst += &src;
            frame += 1;
        }
    }

    // Duration predictor branch off the encoder output.
    denc += &duration_predictor_backward(params, &trace.duration, dlogd, &mut grads);

    // Speaker embedding was broadcast onto every encoder row.
    let d_spk = sum_rows(&denc);
    let mut spk_grad = Array2::zeros(params.get("encoder.speaker_embedding").dim());
    spk_grad.row_mut(trace.encode.speaker).assign(&d_spk.row(0));
    grads.add("encoder.speaker_embedding", spk_grad);

    let mut dx = denc;
    for (i, block) in trace.encode.blocks.iter().enumerate().rev() {
        dx = transformer_block_backward(params, &format!("encoder.layer{i}"), block, &dx, &mut grads);
    }

    // Token embedding scatter.
    let mut emb_grad = Array2::zeros(params.get("encoder.token_embedding").dim());
    for (row, &token) in trace.encode.tokens.iter().enumerate() {
        let mut dst = emb_grad.row_mut(token as usize);
        dst += &dx.row(row);
    }
    grads.add("encoder.token_embedding", emb_grad);

    grads
}
