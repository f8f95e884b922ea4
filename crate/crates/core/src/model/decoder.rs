//! Decoder stack: causal self-attention, cross-attention over the encoder
//! output, then the feed-forward block, each with add-and-normalize.
//! Cross-attention is the only place encoder state enters.

use super::encoder::{embed_backward, embed_forward, EmbedCache};
use super::math::{
    attention_forward, attention_backward, gelu_backward, gelu_forward, layer_norm_backward,
    layer_norm_forward, linear_backward, linear_forward, AttentionCache, AttnMask, LayerNormCache,
};
use super::{DecoderLayerParams, DecoderParams, ModelConfig, Scalar};
use ndarray::Array2;

pub struct DecoderLayerCache<F> {
    self_attn: AttentionCache<F>,
    ln1: LayerNormCache<F>,
    cross: AttentionCache<F>,
    ln_cross: LayerNormCache<F>,
    /// Input to the feed-forward block.
    x2: Array2<F>,
    f1: Array2<F>,
    g: Array2<F>,
    ln2: LayerNormCache<F>,
}

fn decoder_layer_forward<F: Scalar>(
    x: &Array2<F>,
    enc_h: &Array2<F>,
    p: &DecoderLayerParams<F>,
    heads: usize,
    enc_key_mask: Option<&[bool]>,
) -> (Array2<F>, DecoderLayerCache<F>) {
    let causal = AttnMask { causal: true, key_mask: None };
    let (a, self_attn) = attention_forward(x, x, &p.self_attn, heads, causal);
    let r1 = x + &a;
    let (x1, ln1) = layer_norm_forward(&r1, &p.ln1);

    let cross_mask = AttnMask { causal: false, key_mask: enc_key_mask };
    let (cr, cross) = attention_forward(&x1, enc_h, &p.cross_attn, heads, cross_mask);
    let r2 = &x1 + &cr;
    let (x2, ln_cross) = layer_norm_forward(&r2, &p.ln_cross);

    let f1 = linear_forward(&x2, &p.ffn_in);
    let g = gelu_forward(&f1);
    let f2 = linear_forward(&g, &p.ffn_out);
    let r3 = &x2 + &f2;
    let (x3, ln2) = layer_norm_forward(&r3, &p.ln2);
    (x3, DecoderLayerCache { self_attn, ln1, cross, ln_cross, x2, f1, g, ln2 })
}

/// Returns `(d_x, d_enc_h)` for this layer.
fn decoder_layer_backward<F: Scalar>(
    cache: &DecoderLayerCache<F>,
    p: &DecoderLayerParams<F>,
    heads: usize,
    d_out: &Array2<F>,
    grads: &mut DecoderLayerParams<F>,
) -> (Array2<F>, Array2<F>) {
    let d_r3 =
        layer_norm_backward(&cache.ln2, &p.ln2, d_out, &mut grads.ln2.gamma, &mut grads.ln2.beta);
    let d_g =
        linear_backward(&cache.g, &p.ffn_out, &d_r3, &mut grads.ffn_out.w, &mut grads.ffn_out.b);
    let d_f1 = gelu_backward(&cache.f1, &d_g);
    let mut d_x2 =
        linear_backward(&cache.x2, &p.ffn_in, &d_f1, &mut grads.ffn_in.w, &mut grads.ffn_in.b);
    d_x2 += &d_r3;

    let d_r2 = layer_norm_backward(
        &cache.ln_cross,
        &p.ln_cross,
        &d_x2,
        &mut grads.ln_cross.gamma,
        &mut grads.ln_cross.beta,
    );
    let (d_x1_q, d_enc) =
        attention_backward(&cache.cross, &p.cross_attn, heads, &d_r2, &mut grads.cross_attn);
    let d_x1 = &d_r2 + &d_x1_q;

    let d_r1 =
        layer_norm_backward(&cache.ln1, &p.ln1, &d_x1, &mut grads.ln1.gamma, &mut grads.ln1.beta);
    let (d_q, d_kv) =
        attention_backward(&cache.self_attn, &p.self_attn, heads, &d_r1, &mut grads.self_attn);
    (d_r1 + &d_q + &d_kv, d_enc)
}

pub struct DecoderCache<F> {
    embed: EmbedCache<F>,
    layers: Vec<DecoderLayerCache<F>>,
    enc_len: usize,
    hidden: usize,
}

impl<F> DecoderCache<F> {
    /// Causal self-attention cache of one layer.
    pub fn self_attention(&self, layer: usize) -> &AttentionCache<F> {
        &self.layers[layer].self_attn
    }

    /// Cross-attention cache of one layer (queries over encoder output).
    pub fn cross_attention(&self, layer: usize) -> &AttentionCache<F> {
        &self.layers[layer].cross
    }
}

/// Runs the decoder over target-side ids against a fixed encoder output.
pub fn decoder_forward<F: Scalar>(
    p: &DecoderParams<F>,
    cfg: &ModelConfig,
    ids: &[u32],
    enc_h: &Array2<F>,
    enc_key_mask: Option<&[bool]>,
) -> (Array2<F>, DecoderCache<F>) {
    if let Some(m) = enc_key_mask {
        assert_eq!(m.len(), enc_h.nrows());
    }
    let (mut x, embed) = embed_forward(&p.emb, ids);
    let mut layers = Vec::with_capacity(p.layers.len());
    for layer in &p.layers {
        let (next, cache) = decoder_layer_forward(&x, enc_h, layer, cfg.heads, enc_key_mask);
        x = next;
        layers.push(cache);
    }
    let cache =
        DecoderCache { embed, layers, enc_len: enc_h.nrows(), hidden: cfg.hidden };
    (x, cache)
}

/// Returns the gradient with respect to the encoder output, summed over
/// all layers' cross-attention, so fine-tuning can continue the chain into
/// the encoder.
pub fn decoder_backward<F: Scalar>(
    p: &DecoderParams<F>,
    cfg: &ModelConfig,
    cache: &DecoderCache<F>,
    d_h: &Array2<F>,
    grads: &mut DecoderParams<F>,
) -> Array2<F> {
    let mut d = d_h.clone();
    let mut d_enc = Array2::zeros((cache.enc_len, cache.hidden));
    for i in (0..p.layers.len()).rev() {
        let (d_x, d_enc_layer) =
            decoder_layer_backward(&cache.layers[i], &p.layers[i], cfg.heads, &d, &mut grads.layers[i]);
        d = d_x;
        d_enc += &d_enc_layer;
    }
    embed_backward(&cache.embed, &p.emb, &d, &mut grads.emb);
    d_enc
}
