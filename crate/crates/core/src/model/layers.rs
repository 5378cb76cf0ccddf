//! Forward/backward primitives on `f64` matrices.
//!
//! Every forward returns the output plus whatever the matching backward
//! needs. Backwards return input gradients and parameter gradients; callers
//! route parameter gradients into a [`super::params::Gradients`] store.
//! Sequence data is row-major: one row per token or frame.

use ndarray::{s, Array1, Array2, Axis};

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

// ---------------------------------------------------------------------------
// Affine
// ---------------------------------------------------------------------------

pub(crate) fn affine_forward(x: &Array2<f64>, w: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    x.dot(w) + b
}

/// Returns `(dx, dw, db)`.
pub(crate) fn affine_backward(
    x: &Array2<f64>,
    w: &Array2<f64>,
    dy: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let dx = dy.dot(&w.t());
    let dw = x.t().dot(dy);
    let db = sum_rows(dy);
    (dx, dw, db)
}

pub(crate) fn sum_rows(x: &Array2<f64>) -> Array2<f64> {
    x.sum_axis(Axis(0)).insert_axis(Axis(0))
}

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

pub(crate) fn relu_forward(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

pub(crate) fn relu_backward(x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |g, &v| {
        if v <= 0.0 {
            *g = 0.0;
        }
    });
    dx
}

// ---------------------------------------------------------------------------
// Row softmax
// ---------------------------------------------------------------------------

pub(crate) fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    y
}

pub(crate) fn softmax_rows_backward(y: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = Array2::zeros(y.dim());
    for i in 0..y.nrows() {
        let yi = y.row(i);
        let dyi = dy.row(i);
        let dot: f64 = yi.iter().zip(dyi.iter()).map(|(a, b)| a * b).sum();
        for j in 0..y.ncols() {
            dx[(i, j)] = yi[j] * (dyi[j] - dot);
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Layer norm (per row, learned scale/shift)
// ---------------------------------------------------------------------------

pub(crate) struct LayerNormCache {
    pub normalized: Array2<f64>,
    pub inv_std: Array1<f64>,
}

pub(crate) fn layer_norm_forward(
    x: &Array2<f64>,
    gamma: &Array2<f64>,
    beta: &Array2<f64>,
) -> (Array2<f64>, LayerNormCache) {
    let d = x.ncols() as f64;
    let mut normalized = Array2::zeros(x.dim());
    let mut inv_std = Array1::zeros(x.nrows());
    for (i, row) in x.rows().into_iter().enumerate() {
        let mean = row.sum() / d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let istd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[i] = istd;
        for (j, &v) in row.iter().enumerate() {
            normalized[(i, j)] = (v - mean) * istd;
        }
    }
    let y = &normalized * gamma + beta;
    (y, LayerNormCache {
        normalized,
        inv_std,
    })
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &Array2<f64>,
    dy: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let d = dy.ncols() as f64;
    let dbeta = sum_rows(dy);
    let dgamma = sum_rows(&(dy * &cache.normalized));
    let mut dx = Array2::zeros(dy.dim());
    for i in 0..dy.nrows() {
        let istd = cache.inv_std[i];
        let xhat = cache.normalized.row(i);
        let dxhat: Vec<f64> = dy
            .row(i)
            .iter()
            .enumerate()
            .map(|(j, &g)| g * gamma[(0, j)])
            .collect();
        let mean_dxhat = dxhat.iter().sum::<f64>() / d;
        let mean_dxhat_xhat = dxhat
            .iter()
            .zip(xhat.iter())
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / d;
        for j in 0..dy.ncols() {
            dx[(i, j)] = istd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
        }
    }
    (dx, dgamma, dbeta)
}

// ---------------------------------------------------------------------------
// Kernel-3 same-padding 1-D convolution over the sequence axis
// ---------------------------------------------------------------------------
//
// Weights are stored as a `(3 * d_in, d_out)` matrix, tap-major: rows
// `[0, d_in)` hold the tap at offset -1, `[d_in, 2 d_in)` the center tap and
// `[2 d_in, 3 d_in)` the tap at offset +1.

pub(crate) fn conv1d_forward(x: &Array2<f64>, w: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (t, d_in) = x.dim();
    let d_out = w.ncols();
    assert_eq!(w.nrows(), 3 * d_in, "conv weight rows");
    let mut y = Array2::zeros((t, d_out));
    for mut row in y.rows_mut() {
        row += &b.row(0);
    }
    for tap in 0..3usize {
        let w_tap = w.slice(s![tap * d_in..(tap + 1) * d_in, ..]);
        let offset = tap as isize - 1;
        let (x_lo, x_hi, y_lo) = tap_ranges(t, offset);
        if x_lo >= x_hi {
            continue;
        }
        let contribution = x.slice(s![x_lo..x_hi, ..]).dot(&w_tap);
        let mut target = y.slice_mut(s![y_lo..y_lo + (x_hi - x_lo), ..]);
        target += &contribution;
    }
    y
}

/// Returns `(dx, dw, db)`.
pub(crate) fn conv1d_backward(
    x: &Array2<f64>,
    w: &Array2<f64>,
    dy: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let (t, d_in) = x.dim();
    let mut dx = Array2::zeros(x.dim());
    let mut dw = Array2::zeros(w.dim());
    let db = sum_rows(dy);
    for tap in 0..3usize {
        let offset = tap as isize - 1;
        let (x_lo, x_hi, y_lo) = tap_ranges(t, offset);
        if x_lo >= x_hi {
            continue;
        }
        let n = x_hi - x_lo;
        let x_slice = x.slice(s![x_lo..x_hi, ..]);
        let dy_slice = dy.slice(s![y_lo..y_lo + n, ..]);
        let w_tap = w.slice(s![tap * d_in..(tap + 1) * d_in, ..]);
        let mut dw_tap = dw.slice_mut(s![tap * d_in..(tap + 1) * d_in, ..]);
        dw_tap += &x_slice.t().dot(&dy_slice);
        let mut dx_slice = dx.slice_mut(s![x_lo..x_hi, ..]);
        dx_slice += &dy_slice.dot(&w_tap.t());
    }
    (dx, dw, db)
}

/// For output position `p`, tap offset `o` reads input row `p + o`. Returns
/// the valid input range `[x_lo, x_hi)` and the first output row `y_lo`.
fn tap_ranges(t: usize, offset: isize) -> (usize, usize, usize) {
    match offset {
        -1 => (0, t.saturating_sub(1), 1),
        0 => (0, t, 0),
        1 => (1.min(t), t, 0),
        _ => unreachable!(),
    }
}

// ---------------------------------------------------------------------------
// Sinusoidal positional encoding
// ---------------------------------------------------------------------------

pub(crate) fn positional_encoding(len: usize, d_model: usize) -> Array2<f64> {
    let mut pe = Array2::zeros((len, d_model));
    for pos in 0..len {
        for i in 0..d_model {
            let exponent = (2 * (i / 2)) as f64 / d_model as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            pe[(pos, i)] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

// ---------------------------------------------------------------------------
// Multi-head self-attention
// ---------------------------------------------------------------------------

pub(crate) struct AttentionParams<'a> {
    pub wq: &'a Array2<f64>,
    pub bq: &'a Array2<f64>,
    pub wk: &'a Array2<f64>,
    pub bk: &'a Array2<f64>,
    pub wv: &'a Array2<f64>,
    pub bv: &'a Array2<f64>,
    pub wo: &'a Array2<f64>,
    pub bo: &'a Array2<f64>,
}

pub(crate) struct AttentionGrads {
    pub dwq: Array2<f64>,
    pub dbq: Array2<f64>,
    pub dwk: Array2<f64>,
    pub dbk: Array2<f64>,
    pub dwv: Array2<f64>,
    pub dbv: Array2<f64>,
    pub dwo: Array2<f64>,
    pub dbo: Array2<f64>,
}

pub(crate) struct SelfAttentionCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    weights: Vec<Array2<f64>>,
    context: Array2<f64>,
    n_heads: usize,
    d_attn: usize,
}

pub(crate) fn self_attention_forward(
    x: &Array2<f64>,
    p: &AttentionParams,
    n_heads: usize,
    d_attn: usize,
) -> (Array2<f64>, SelfAttentionCache) {
    let q = affine_forward(x, p.wq, p.bq);
    let k = affine_forward(x, p.wk, p.bk);
    let v = affine_forward(x, p.wv, p.bv);
    let scale = 1.0 / (d_attn as f64).sqrt();
    let t = x.nrows();
    let mut context = Array2::zeros((t, n_heads * d_attn));
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = h * d_attn..(h + 1) * d_attn;
        let qh = q.slice(s![.., cols.clone()]);
        let kh = k.slice(s![.., cols.clone()]);
        let vh = v.slice(s![.., cols.clone()]);
        let scores = qh.dot(&kh.t()) * scale;
        let a = softmax_rows(&scores);
        let ctx = a.dot(&vh);
        context.slice_mut(s![.., cols]).assign(&ctx);
        weights.push(a);
    }
    let y = affine_forward(&context, p.wo, p.bo);
    (y, SelfAttentionCache {
        q,
        k,
        v,
        weights,
        context,
        n_heads,
        d_attn,
    })
}

/// Returns `(dx, grads)`.
pub(crate) fn self_attention_backward(
    x: &Array2<f64>,
    p: &AttentionParams,
    cache: &SelfAttentionCache,
    dy: &Array2<f64>,
) -> (Array2<f64>, AttentionGrads) {
    let (dcontext, dwo, dbo) = affine_backward(&cache.context, p.wo, dy);
    let d_attn = cache.d_attn;
    let scale = 1.0 / (d_attn as f64).sqrt();
    let mut dq = Array2::zeros(cache.q.dim());
    let mut dk = Array2::zeros(cache.k.dim());
    let mut dv = Array2::zeros(cache.v.dim());
    for h in 0..cache.n_heads {
        let cols = h * d_attn..(h + 1) * d_attn;
        let a = &cache.weights[h];
        let qh = cache.q.slice(s![.., cols.clone()]);
        let kh = cache.k.slice(s![.., cols.clone()]);
        let vh = cache.v.slice(s![.., cols.clone()]);
        let dctx = dcontext.slice(s![.., cols.clone()]);
        let da = dctx.dot(&vh.t());
        dv.slice_mut(s![.., cols.clone()])
            .assign(&a.t().dot(&dctx));
        let dscores = softmax_rows_backward(a, &da) * scale;
        dq.slice_mut(s![.., cols.clone()]).assign(&dscores.dot(&kh));
        dk.slice_mut(s![.., cols]).assign(&dscores.t().dot(&qh));
    }
    let (dx_q, dwq, dbq) = affine_backward(x, p.wq, &dq);
    let (dx_k, dwk, dbk) = affine_backward(x, p.wk, &dk);
    let (dx_v, dwv, dbv) = affine_backward(x, p.wv, &dv);
    let dx = dx_q + dx_k + dx_v;
    (dx, AttentionGrads {
        dwq,
        dbq,
        dwk,
        dbk,
        dwv,
        dbv,
        dwo,
        dbo,
    })
}

// ---------------------------------------------------------------------------
// Cross-attention from per-token features onto a single conditioning vector
// ---------------------------------------------------------------------------

pub(crate) struct CrossAttentionCache {
    pub q: Array2<f64>,
    pub key: Array2<f64>,
    pub value: Array2<f64>,
    pub weights: Array2<f64>,
    /// Attention context per position, before the output projection and the
    /// residual; identical across rows when the key set is a singleton.
    pub context: Array2<f64>,
}

/// Query from `x` (`T x d`), key/value from the single row `cond` (`1 x d`).
/// Output is `x + out_proj(context)` -- the residual sum, no normalization.
pub(crate) fn cross_attention_forward(
    x: &Array2<f64>,
    cond: &Array2<f64>,
    p: &AttentionParams,
    d_attn: usize,
) -> (Array2<f64>, CrossAttentionCache) {
    let q = affine_forward(x, p.wq, p.bq);
    let key = affine_forward(cond, p.wk, p.bk);
    let value = affine_forward(cond, p.wv, p.bv);
    let scale = 1.0 / (d_attn as f64).sqrt();
    let scores = q.dot(&key.t()) * scale;
    let weights = softmax_rows(&scores);
    let context = weights.dot(&value);
    let projected = affine_forward(&context, p.wo, p.bo);
    let y = x + &projected;
    (y, CrossAttentionCache {
        q,
        key,
        value,
        weights,
        context,
    })
}

/// Returns `(dx, dcond, grads)`.
pub(crate) fn cross_attention_backward(
    x: &Array2<f64>,
    cond: &Array2<f64>,
    p: &AttentionParams,
    cache: &CrossAttentionCache,
    dy: &Array2<f64>,
    d_attn: usize,
) -> (Array2<f64>, Array2<f64>, AttentionGrads) {
    let scale = 1.0 / (d_attn as f64).sqrt();
    let (dcontext, dwo, dbo) = affine_backward(&cache.context, p.wo, dy);
    let da = dcontext.dot(&cache.value.t());
    let dvalue = cache.weights.t().dot(&dcontext);
    // Singleton softmax has zero Jacobian, so dscores vanishes; kept generic
    // for multi-key conditioning.
    let dscores = softmax_rows_backward(&cache.weights, &da) * scale;
    let dq = dscores.dot(&cache.key);
    let dkey = dscores.t().dot(&cache.q);
    let (dx_q, dwq, dbq) = affine_backward(x, p.wq, &dq);
    let (dcond_k, dwk, dbk) = affine_backward(cond, p.wk, &dkey);
    let (dcond_v, dwv, dbv) = affine_backward(cond, p.wv, &dvalue);
    let dx = dy + &dx_q;
    let dcond = dcond_k + dcond_v;
    (dx, dcond, AttentionGrads {
        dwq,
        dbq,
        dwk,
        dbk,
        dwv,
        dbv,
        dwo,
        dbo,
    })
}
