//! Embedding, encoder stack, tied output head, and the masked loss.

use super::math::{
    attention_forward, attention_backward, c, gelu_backward, gelu_forward, layer_norm_backward,
    layer_norm_forward, linear_backward, linear_forward, AttentionCache, AttnMask, LayerNormCache,
};
use super::{EmbeddingParams, EncoderLayerParams, EncoderParams, ModelConfig, Scalar};
use crate::corruption::IGNORE_LABEL;
use ndarray::{Array1, Array2, Axis};

pub struct EmbedCache<F> {
    ids: Vec<u32>,
    ln: LayerNormCache<F>,
}

/// Token row plus position row, then layer norm.
pub fn embed_forward<F: Scalar>(
    p: &EmbeddingParams<F>,
    ids: &[u32],
) -> (Array2<F>, EmbedCache<F>) {
    let t = ids.len();
    assert!(t > 0, "cannot embed an empty sequence");
    assert!(
        t <= p.position.nrows(),
        "sequence of {t} exceeds the {} learned positions",
        p.position.nrows()
    );
    let h = p.token.ncols();
    let mut x = Array2::zeros((t, h));
    for (i, &id) in ids.iter().enumerate() {
        assert!((id as usize) < p.token.nrows(), "token id {id} outside the vocabulary");
        let sum = &p.token.row(id as usize) + &p.position.row(i);
        x.row_mut(i).assign(&sum);
    }
    let (y, ln) = layer_norm_forward(&x, &p.ln);
    (y, EmbedCache { ids: ids.to_vec(), ln })
}

pub fn embed_backward<F: Scalar>(
    cache: &EmbedCache<F>,
    p: &EmbeddingParams<F>,
    d_out: &Array2<F>,
    grads: &mut EmbeddingParams<F>,
) {
    let d_sum = layer_norm_backward(&cache.ln, &p.ln, d_out, &mut grads.ln.gamma, &mut grads.ln.beta);
    for (i, &id) in cache.ids.iter().enumerate() {
        let row = d_sum.row(i);
        let mut tok = grads.token.row_mut(id as usize);
        tok += &row;
        let mut pos = grads.position.row_mut(i);
        pos += &row;
    }
}

pub struct EncoderLayerCache<F> {
    attn: AttentionCache<F>,
    ln1: LayerNormCache<F>,
    /// Input to the feed-forward block (after the first add-and-norm).
    x1: Array2<F>,
    /// Pre-activation of the feed-forward hidden layer.
    f1: Array2<F>,
    g: Array2<F>,
    ln2: LayerNormCache<F>,
}

fn encoder_layer_forward<F: Scalar>(
    x: &Array2<F>,
    p: &EncoderLayerParams<F>,
    heads: usize,
    mask: AttnMask<'_>,
) -> (Array2<F>, EncoderLayerCache<F>) {
    let (a, attn) = attention_forward(x, x, &p.attn, heads, mask);
    let r1 = x + &a;
    let (x1, ln1) = layer_norm_forward(&r1, &p.ln1);
    let f1 = linear_forward(&x1, &p.ffn_in);
    let g = gelu_forward(&f1);
    let f2 = linear_forward(&g, &p.ffn_out);
    let r2 = &x1 + &f2;
    let (x2, ln2) = layer_norm_forward(&r2, &p.ln2);
    (x2, EncoderLayerCache { attn, ln1, x1, f1, g, ln2 })
}

fn encoder_layer_backward<F: Scalar>(
    cache: &EncoderLayerCache<F>,
    p: &EncoderLayerParams<F>,
    heads: usize,
    d_out: &Array2<F>,
    grads: &mut EncoderLayerParams<F>,
) -> Array2<F> {
    let d_r2 = layer_norm_backward(&cache.ln2, &p.ln2, d_out, &mut grads.ln2.gamma, &mut grads.ln2.beta);
    let d_g = linear_backward(&cache.g, &p.ffn_out, &d_r2, &mut grads.ffn_out.w, &mut grads.ffn_out.b);
    let d_f1 = gelu_backward(&cache.f1, &d_g);
    let mut d_x1 =
        linear_backward(&cache.x1, &p.ffn_in, &d_f1, &mut grads.ffn_in.w, &mut grads.ffn_in.b);
    d_x1 += &d_r2; // residual around the feed-forward block
    let d_r1 = layer_norm_backward(&cache.ln1, &p.ln1, &d_x1, &mut grads.ln1.gamma, &mut grads.ln1.beta);
    let (d_q, d_kv) = attention_backward(&cache.attn, &p.attn, heads, &d_r1, &mut grads.attn);
    // residual plus both self-attention inputs
    d_r1 + &d_q + &d_kv
}

pub struct EncoderCache<F> {
    embed: EmbedCache<F>,
    layers: Vec<EncoderLayerCache<F>>,
}

impl<F> EncoderCache<F> {
    /// Self-attention cache of one layer, for probing attention weights.
    pub fn attention(&self, layer: usize) -> &AttentionCache<F> {
        &self.layers[layer].attn
    }
}

/// Runs the full encoder. `key_mask`, when given, hides padded positions
/// from attention; hidden states at hidden positions are still computed
/// but never influence a visible one.
pub fn encoder_forward<F: Scalar>(
    p: &EncoderParams<F>,
    cfg: &ModelConfig,
    ids: &[u32],
    key_mask: Option<&[bool]>,
) -> (Array2<F>, EncoderCache<F>) {
    if let Some(m) = key_mask {
        assert_eq!(m.len(), ids.len());
    }
    let mask = AttnMask { causal: false, key_mask };
    let (mut x, embed) = embed_forward(&p.emb, ids);
    let mut layers = Vec::with_capacity(p.layers.len());
    for layer in &p.layers {
        let (next, cache) = encoder_layer_forward(&x, layer, cfg.heads, mask);
        x = next;
        layers.push(cache);
    }
    (x, EncoderCache { embed, layers })
}

pub fn encoder_backward<F: Scalar>(
    p: &EncoderParams<F>,
    cfg: &ModelConfig,
    cache: &EncoderCache<F>,
    d_h: &Array2<F>,
    grads: &mut EncoderParams<F>,
) {
    let mut d = d_h.clone();
    for i in (0..p.layers.len()).rev() {
        d = encoder_layer_backward(
            &cache.layers[i],
            &p.layers[i],
            cfg.heads,
            &d,
            &mut grads.layers[i],
        );
    }
    embed_backward(&cache.embed, &p.emb, &d, &mut grads.emb);
}

/// Logits through the tied head: hidden states against the transposed
/// token table, plus the output bias.
pub fn lm_logits<F: Scalar>(
    h: &Array2<F>,
    token: &Array2<F>,
    out_bias: &Array1<F>,
) -> Array2<F> {
    h.dot(&token.t()) + out_bias
}

/// Returns `d_h`; accumulates into the token table and bias gradients.
pub fn lm_logits_backward<F: Scalar>(
    d_logits: &Array2<F>,
    h: &Array2<F>,
    token: &Array2<F>,
    d_token: &mut Array2<F>,
    d_bias: &mut Array1<F>,
) -> Array2<F> {
    *d_token += &d_logits.t().dot(h);
    *d_bias += &d_logits.sum_axis(Axis(0));
    d_logits.dot(token)
}

/// Mean cross-entropy over the supervised rows (labels other than
/// `IGNORE_LABEL`), with its gradient. Returns zero loss and gradient when
/// nothing is supervised.
pub fn masked_cross_entropy<F: Scalar>(
    logits: &Array2<F>,
    labels: &[u32],
) -> (F, Array2<F>, usize) {
    let (rows, vocab) = logits.dim();
    assert_eq!(rows, labels.len());
    let n = labels.iter().filter(|&&l| l != IGNORE_LABEL).count();
    let mut d = Array2::zeros((rows, vocab));
    if n == 0 {
        return (F::zero(), d, 0);
    }
    let inv_n = F::one() / c::<F>(n as f64);
    let mut loss = F::zero();
    for (t, &label) in labels.iter().enumerate() {
        if label == IGNORE_LABEL {
            continue;
        }
        assert!((label as usize) < vocab, "label {label} outside the vocabulary");
        let row = logits.row(t);
        let max = row.fold(F::neg_infinity(), |a, &v| if v > a { v } else { a });
        let mut sum = F::zero();
        for j in 0..vocab {
            sum += (row[j] - max).exp();
        }
        let lse = max + sum.ln();
        loss += (lse - row[label as usize]) * inv_n;
        for j in 0..vocab {
            d[[t, j]] = (row[j] - max).exp() / sum * inv_n;
        }
        d[[t, label as usize]] -= inv_n;
    }
    (loss, d, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::PAD_ID;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig::new(30, 8, 2, 2, 16, 12).unwrap()
    }

    #[test]
    fn embedding_adds_token_and_position_rows() {
        let config = cfg();
        let p = EncoderParams::<f64>::init(&config, 3);
        let (x, _) = embed_forward(&p.emb, &[7, 7]);
        // same token at different positions must differ through the
        // position table
        assert!(x.row(0) != x.row(1));
    }

    #[test]
    fn embedding_gradients_match_finite_differences() {
        let config = cfg();
        let p = EncoderParams::<f64>::init(&config, 4);
        let ids = [2u32, 9, 9, 5];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = Array2::from_shape_fn((4, config.hidden), |_| rng.random::<f64>() - 0.5);
        let loss = |emb: &EmbeddingParams<f64>| (&embed_forward(emb, &ids).0 * &w).sum();
        let (_, cache) = embed_forward(&p.emb, &ids);
        let mut grads = EncoderParams::<f64>::zeros(&config);
        embed_backward(&cache, &p.emb, &w, &mut grads.emb);
        let h = 1e-6;
        // token 9 appears twice; its gradient row accumulates both uses
        for &(id, j) in &[(9usize, 0usize), (2, 3), (5, 7)] {
            let mut up = p.emb.clone();
            up.token[[id, j]] += h;
            let mut dn = p.emb.clone();
            dn.token[[id, j]] -= h;
            let num = (loss(&up) - loss(&dn)) / (2.0 * h);
            let got = grads.emb.token[[id, j]];
            assert!((got - num).abs() < 1e-6, "d token[{id},{j}]: {got} vs {num}");
        }
        let mut up = p.emb.clone();
        up.position[[2, 1]] += h;
        let mut dn = p.emb.clone();
        dn.position[[2, 1]] -= h;
        let num = (loss(&up) - loss(&dn)) / (2.0 * h);
        assert!((grads.emb.position[[2, 1]] - num).abs() < 1e-6);
    }

    #[test]
    fn forward_is_deterministic_and_shaped() {
        let config = cfg();
        let p = EncoderParams::<f32>::init(&config, 5);
        let ids = [2u32, 10, 11, 12, 3];
        let (a, _) = encoder_forward(&p, &config, &ids, None);
        let (b, _) = encoder_forward(&p, &config, &ids, None);
        assert_eq!(a, b);
        assert_eq!(a.dim(), (5, config.hidden));
    }

    #[test]
    fn padding_does_not_perturb_visible_positions() {
        let config = cfg();
        let p = EncoderParams::<f32>::init(&config, 6);
        let ids = [2u32, 10, 11, 3];
        let (h_plain, _) = encoder_forward(&p, &config, &ids, None);
        let padded = [2u32, 10, 11, 3, PAD_ID, PAD_ID, PAD_ID];
        let mask = [true, true, true, true, false, false, false];
        let (h_padded, _) = encoder_forward(&p, &config, &padded, Some(&mask));
        // bit-identical, not merely close: masked keys have probability
        // exactly zero, and per-row ops see the same inputs in the same order
        for t in 0..4 {
            assert_eq!(h_plain.row(t), h_padded.row(t), "row {t} changed under padding");
        }
    }

    #[test]
    fn lm_logits_use_the_transposed_token_table() {
        let token = array![[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]];
        let bias = array![0.5, 0.0, 0.0];
        let h = array![[3.0, 4.0]];
        let logits = lm_logits(&h, &token, &bias);
        assert_eq!(logits, array![[3.5, 8.0, 7.0]]);
    }

    #[test]
    fn cross_entropy_matches_a_hand_computation() {
        let logits = array![[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]];
        let labels = [2u32, IGNORE_LABEL];
        let (loss, d, n) = masked_cross_entropy(&logits, &labels);
        assert_eq!(n, 1);
        // lse = 3 + ln(1 + e^-1 + e^-2); loss = lse - 3
        let expected = (1.0f64 + (-1.0f64).exp() + (-2.0f64).exp()).ln();
        assert!((loss - expected).abs() < 1e-12);
        // gradient row sums to zero and ignored rows stay zero
        assert!(d.row(0).sum().abs() < 1e-12);
        assert_eq!(d.row(1).sum(), 0.0);
        // supervised entry is softmax minus one
        let p2 = (3.0f64 - (3.0 + expected)).exp();
        assert!((d[[0, 2]] - (p2 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let logits = Array2::from_shape_fn((3, 5), |_| rng.random::<f64>() * 2.0 - 1.0);
        let labels = [4u32, IGNORE_LABEL, 0];
        let (_, d, _) = masked_cross_entropy(&logits, &labels);
        let h = 1e-6;
        for &(t, j) in &[(0usize, 4usize), (0, 1), (2, 0), (2, 3)] {
            let mut up = logits.clone();
            up[[t, j]] += h;
            let mut dn = logits.clone();
            dn[[t, j]] -= h;
            let num = (masked_cross_entropy(&up, &labels).0
                - masked_cross_entropy(&dn, &labels).0)
                / (2.0 * h);
            assert!((d[[t, j]] - num).abs() < 1e-8, "d[{t},{j}]");
        }
        // the ignored row receives no gradient anywhere
        assert!(d.row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_supervision_gives_zero_loss_and_gradient() {
        let logits = array![[1.0, 2.0]];
        let (loss, d, n) = masked_cross_entropy(&logits, &[IGNORE_LABEL]);
        assert_eq!(loss, 0.0);
        assert_eq!(n, 0);
        assert!(d.iter().all(|&v| v == 0.0));
    }
}
