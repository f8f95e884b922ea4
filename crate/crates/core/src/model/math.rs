//! Differentiable primitives. Every forward returns what its backward
//! needs; every backward accumulates parameter gradients with `+=` so one
//! gradient tree can serve a whole batch.
//!
//! Attention masking is exact: a disallowed key gets probability 0.0, not
//! a large negative logit, so masked positions cannot leak into allowed
//! ones even at the last bit.

use super::{AttentionParams, LayerNormParams, LinearParams, Scalar, LN_EPS};
use ndarray::{s, Array1, Array2, ArrayView2, Axis};

pub(crate) fn c<F: Scalar>(x: f64) -> F {
    F::from_f64(x).expect("constant is finite")
}

/// `y = x w + b` over rows of `x`.
pub fn linear_forward<F: Scalar>(x: &Array2<F>, p: &LinearParams<F>) -> Array2<F> {
    x.dot(&p.w) + &p.b
}

/// Returns `dx`; accumulates into `dw`, `db`.
pub fn linear_backward<F: Scalar>(
    x: &Array2<F>,
    p: &LinearParams<F>,
    dy: &Array2<F>,
    dw: &mut Array2<F>,
    db: &mut Array1<F>,
) -> Array2<F> {
    *dw += &x.t().dot(dy);
    *db += &dy.sum_axis(Axis(0));
    dy.dot(&p.w.t())
}

pub struct LayerNormCache<F> {
    /// Normalized rows before scale and shift.
    xhat: Array2<F>,
    /// Per-row `1 / sqrt(var + eps)`.
    inv_std: Array1<F>,
}

pub fn layer_norm_forward<F: Scalar>(
    x: &Array2<F>,
    p: &LayerNormParams<F>,
) -> (Array2<F>, LayerNormCache<F>) {
    let (rows, cols) = x.dim();
    let n = c::<F>(cols as f64);
    let eps = c::<F>(LN_EPS);
    let mut xhat = Array2::zeros((rows, cols));
    let mut inv_std = Array1::zeros(rows);
    for t in 0..rows {
        let row = x.row(t);
        let mean = row.sum() / n;
        let var = row.fold(F::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / n;
        let inv = F::one() / (var + eps).sqrt();
        inv_std[t] = inv;
        for j in 0..cols {
            xhat[[t, j]] = (x[[t, j]] - mean) * inv;
        }
    }
    let y = &xhat * &p.gamma + &p.beta;
    (y, LayerNormCache { xhat, inv_std })
}

pub fn layer_norm_backward<F: Scalar>(
    cache: &LayerNormCache<F>,
    p: &LayerNormParams<F>,
    dy: &Array2<F>,
    dgamma: &mut Array1<F>,
    dbeta: &mut Array1<F>,
) -> Array2<F> {
    let (rows, cols) = cache.xhat.dim();
    let n = c::<F>(cols as f64);
    *dgamma += &(dy * &cache.xhat).sum_axis(Axis(0));
    *dbeta += &dy.sum_axis(Axis(0));
    let mut dx = Array2::zeros((rows, cols));
    for t in 0..rows {
        let mut mean_dxhat = F::zero();
        let mut mean_dxhat_xhat = F::zero();
        for j in 0..cols {
            let dxh = dy[[t, j]] * p.gamma[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * cache.xhat[[t, j]];
        }
        mean_dxhat /= n;
        mean_dxhat_xhat /= n;
        for j in 0..cols {
            let dxh = dy[[t, j]] * p.gamma[j];
            dx[[t, j]] =
                cache.inv_std[t] * (dxh - mean_dxhat - cache.xhat[[t, j]] * mean_dxhat_xhat);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-form GELU, elementwise.
pub fn gelu_forward<F: Scalar>(x: &Array2<F>) -> Array2<F> {
    let gc = c::<F>(GELU_C);
    let ga = c::<F>(GELU_A);
    let half = c::<F>(0.5);
    x.mapv(|v| half * v * (F::one() + (gc * (v + ga * v * v * v)).tanh()))
}

pub fn gelu_backward<F: Scalar>(x: &Array2<F>, dy: &Array2<F>) -> Array2<F> {
    let gc = c::<F>(GELU_C);
    let ga = c::<F>(GELU_A);
    let half = c::<F>(0.5);
    let three = c::<F>(3.0);
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |d, &v| {
        let u = gc * (v + ga * v * v * v);
        let t = u.tanh();
        let sech2 = F::one() - t * t;
        let du = gc * (F::one() + three * ga * v * v);
        *d = *d * (half * (F::one() + t) + half * v * sech2 * du);
    });
    dx
}

/// Which keys each query row may attend to.
#[derive(Clone, Copy)]
pub struct AttnMask<'a> {
    /// Query row `i` sees only keys `j <= i`. Requires square score shape.
    pub causal: bool,
    /// Keys where the mask is `false` are invisible to every query.
    pub key_mask: Option<&'a [bool]>,
}

impl AttnMask<'_> {
    pub const NONE: AttnMask<'static> = AttnMask { causal: false, key_mask: None };

    fn allows(&self, i: usize, j: usize) -> bool {
        (!self.causal || j <= i) && self.key_mask.is_none_or(|m| m[j])
    }
}

/// Row-wise softmax over the allowed keys only; disallowed entries come out
/// exactly 0.0. Every row must have at least one allowed key.
pub fn masked_softmax_rows<F: Scalar>(scores: &Array2<F>, mask: AttnMask<'_>) -> Array2<F> {
    let (rows, cols) = scores.dim();
    let mut probs = Array2::zeros((rows, cols));
    for i in 0..rows {
        let mut max = F::neg_infinity();
        for j in 0..cols {
            if mask.allows(i, j) && scores[[i, j]] > max {
                max = scores[[i, j]];
            }
        }
        assert!(max > F::neg_infinity(), "attention row {i} has no allowed keys");
        let mut sum = F::zero();
        for j in 0..cols {
            if mask.allows(i, j) {
                let e = (scores[[i, j]] - max).exp();
                probs[[i, j]] = e;
                sum += e;
            }
        }
        for j in 0..cols {
            if mask.allows(i, j) {
                probs[[i, j]] /= sum;
            }
        }
    }
    probs
}

/// `dS = P (dP - rowsum(dP P))`; zero at masked entries because `P` is.
pub fn masked_softmax_backward<F: Scalar>(probs: &Array2<F>, dprobs: &Array2<F>) -> Array2<F> {
    let (rows, cols) = probs.dim();
    let mut ds = Array2::zeros((rows, cols));
    for i in 0..rows {
        let mut inner = F::zero();
        for j in 0..cols {
            inner += dprobs[[i, j]] * probs[[i, j]];
        }
        for j in 0..cols {
            ds[[i, j]] = probs[[i, j]] * (dprobs[[i, j]] - inner);
        }
    }
    ds
}

pub struct AttentionCache<F> {
    q_in: Array2<F>,
    kv_in: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    /// Per-head attention probabilities.
    probs: Vec<Array2<F>>,
    ctx: Array2<F>,
}

impl<F: Scalar> AttentionCache<F> {
    /// Attention probabilities of one head, `[query_len, key_len]`.
    pub fn head_probs(&self, head: usize) -> &Array2<F> {
        &self.probs[head]
    }
}

/// Multi-head scaled dot-product attention. Self-attention passes the same
/// array for `q_in` and `kv_in`; cross-attention passes decoder state and
/// encoder output. Scores scale by `1 / sqrt(head_dim)`.
pub fn attention_forward<F: Scalar>(
    q_in: &Array2<F>,
    kv_in: &Array2<F>,
    p: &AttentionParams<F>,
    heads: usize,
    mask: AttnMask<'_>,
) -> (Array2<F>, AttentionCache<F>) {
    let hidden = q_in.ncols();
    assert_eq!(kv_in.ncols(), hidden);
    assert_eq!(hidden % heads, 0);
    let dh = hidden / heads;
    let scale = c::<F>(1.0 / (dh as f64).sqrt());
    let q = linear_forward(q_in, &p.q);
    let k = linear_forward(kv_in, &p.k);
    let v = linear_forward(kv_in, &p.v);
    let tq = q_in.nrows();
    let mut ctx = Array2::zeros((tq, hidden));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let scores = qh.dot(&kh.t()) * scale;
        let ph = masked_softmax_rows(&scores, mask);
        ctx.slice_mut(cols).assign(&ph.dot(&vh));
        probs.push(ph);
    }
    let out = linear_forward(&ctx, &p.o);
    let cache = AttentionCache {
        q_in: q_in.clone(),
        kv_in: kv_in.clone(),
        q,
        k,
        v,
        probs,
        ctx,
    };
    (out, cache)
}

/// Returns `(d_q_in, d_kv_in)`; accumulates into the gradient block.
pub fn attention_backward<F: Scalar>(
    cache: &AttentionCache<F>,
    p: &AttentionParams<F>,
    heads: usize,
    d_out: &Array2<F>,
    grads: &mut AttentionParams<F>,
) -> (Array2<F>, Array2<F>) {
    let hidden = cache.q_in.ncols();
    let dh = hidden / heads;
    let scale = c::<F>(1.0 / (dh as f64).sqrt());
    let d_ctx = linear_backward(&cache.ctx, &p.o, d_out, &mut grads.o.w, &mut grads.o.b);
    let tq = cache.q_in.nrows();
    let tk = cache.kv_in.nrows();
    let mut dq = Array2::zeros((tq, hidden));
    let mut dk = Array2::zeros((tk, hidden));
    let mut dv = Array2::zeros((tk, hidden));
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let ph = &cache.probs[h];
        let vh: ArrayView2<F> = cache.v.slice(cols);
        let kh: ArrayView2<F> = cache.k.slice(cols);
        let qh: ArrayView2<F> = cache.q.slice(cols);
        let d_ctx_h = d_ctx.slice(cols);
        let dp = d_ctx_h.dot(&vh.t());
        dv.slice_mut(cols).assign(&ph.t().dot(&d_ctx_h));
        let ds = masked_softmax_backward(ph, &dp) * scale;
        dq.slice_mut(cols).assign(&ds.dot(&kh));
        dk.slice_mut(cols).assign(&ds.t().dot(&qh));
    }
    let d_q_in = linear_backward(&cache.q_in, &p.q, &dq, &mut grads.q.w, &mut grads.q.b);
    let mut d_kv_in = linear_backward(&cache.kv_in, &p.k, &dk, &mut grads.k.w, &mut grads.k.b);
    d_kv_in += &linear_backward(&cache.kv_in, &p.v, &dv, &mut grads.v.w, &mut grads.v.b);
    (d_q_in, d_kv_in)
}
