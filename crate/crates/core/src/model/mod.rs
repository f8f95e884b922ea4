//! Transformer encoder-decoder with hand-written gradients.
//!
//! The encoder is a post-norm residual stack: token plus learned position
//! embeddings through a layer norm, then per layer multi-head
//! self-attention and a GELU feed-forward block, each followed by an
//! add-and-normalize. The decoder adds causal masking to its
//! self-attention and a cross-attention block over the encoder output
//! between self-attention and feed-forward. Output logits share the token
//! embedding matrix in both directions (the output projection is its
//! transpose), with a separate bias.
//!
//! Everything runs one sequence at a time as `[seq_len, hidden]` arrays.
//! Forward passes return explicit caches; backward passes consume them and
//! accumulate into a parameter-shaped gradient tree, so an optimizer can
//! walk parameters and gradients in lockstep via [`tensors`]
//! (`EncoderParams::tensors`) without knowing the architecture.

mod decoder;
mod encoder;
pub mod math;

pub use decoder::{decoder_forward, decoder_backward, DecoderCache};
pub use encoder::{
    embed_backward, embed_forward, encoder_backward, encoder_forward, lm_logits,
    lm_logits_backward, masked_cross_entropy, EncoderCache,
};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Element type for all tensors: `f32` for training and checkpoints,
/// `f64` in the finite-difference tests.
pub trait Scalar: ndarray::NdFloat + num_traits::FromPrimitive {}
impl<T: ndarray::NdFloat + num_traits::FromPrimitive> Scalar for T {}

/// Standard deviation of the truncated-normal weight initialization.
/// Draws beyond two standard deviations are resampled.
pub const INIT_STD: f64 = 0.02;

/// Layer-norm variance floor.
pub const LN_EPS: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
}

/// Architecture shape. `hidden` must divide evenly into `heads`; the
/// feed-forward width is free but conventionally `4 * hidden`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_positions: usize,
}

impl ModelConfig {
    pub fn new(
        vocab_size: usize,
        hidden: usize,
        layers: usize,
        heads: usize,
        ffn: usize,
        max_positions: usize,
    ) -> Result<Self, ModelError> {
        let cfg = ModelConfig { vocab_size, hidden, layers, heads, ffn, max_positions };
        if vocab_size <= 5 {
            return Err(ModelError::InvalidConfig(
                "vocabulary must contain content tokens beyond the five specials".to_string(),
            ));
        }
        if hidden == 0 || layers == 0 || heads == 0 || ffn == 0 || max_positions == 0 {
            return Err(ModelError::InvalidConfig("all dimensions must be nonzero".to_string()));
        }
        if hidden % heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "hidden size {hidden} is not divisible by {heads} heads"
            )));
        }
        Ok(cfg)
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Token table, position table, embedding layer norm.
    pub fn embedding_param_count(&self) -> usize {
        self.vocab_size * self.hidden + self.max_positions * self.hidden + 2 * self.hidden
    }

    /// One attention block: four square projections with biases.
    fn attention_param_count(&self) -> usize {
        4 * (self.hidden * self.hidden + self.hidden)
    }

    /// One encoder layer: self-attention, two layer norms, feed-forward.
    pub fn encoder_layer_param_count(&self) -> usize {
        self.attention_param_count()
            + 2 * (2 * self.hidden)
            + (self.hidden * self.ffn + self.ffn)
            + (self.ffn * self.hidden + self.hidden)
    }

    /// All parameters of the encoder, including the tied-head output bias.
    pub fn encoder_param_count(&self) -> usize {
        self.embedding_param_count()
            + self.layers * self.encoder_layer_param_count()
            + self.vocab_size
    }

    /// Cross-attention projection weights and biases across all layers:
    /// the parameters a warm start cannot take from an encoder checkpoint.
    pub fn cross_attention_weight_count(&self) -> usize {
        self.layers * self.attention_param_count()
    }

    /// The cross-attention block's layer norms across all layers, also
    /// absent from an encoder checkpoint.
    pub fn cross_attention_norm_count(&self) -> usize {
        self.layers * 2 * self.hidden
    }

    pub fn decoder_param_count(&self) -> usize {
        self.encoder_param_count()
            + self.cross_attention_weight_count()
            + self.cross_attention_norm_count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams<F> {
    /// `[in, out]`; applied as `y = x w + b`.
    pub w: Array2<F>,
    pub b: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<F> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<F> {
    pub q: LinearParams<F>,
    pub k: LinearParams<F>,
    pub v: LinearParams<F>,
    pub o: LinearParams<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingParams<F> {
    /// `[vocab, hidden]`; also the transposed output projection.
    pub token: Array2<F>,
    /// `[max_positions, hidden]`, learned.
    pub position: Array2<F>,
    pub ln: LayerNormParams<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerParams<F> {
    pub attn: AttentionParams<F>,
    pub ln1: LayerNormParams<F>,
    pub ffn_in: LinearParams<F>,
    pub ffn_out: LinearParams<F>,
    pub ln2: LayerNormParams<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayerParams<F> {
    pub self_attn: AttentionParams<F>,
    pub ln1: LayerNormParams<F>,
    pub cross_attn: AttentionParams<F>,
    pub ln_cross: LayerNormParams<F>,
    pub ffn_in: LinearParams<F>,
    pub ffn_out: LinearParams<F>,
    pub ln2: LayerNormParams<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<F> {
    pub emb: EmbeddingParams<F>,
    pub layers: Vec<EncoderLayerParams<F>>,
    /// Bias of the tied output head.
    pub out_bias: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams<F> {
    pub emb: EmbeddingParams<F>,
    pub layers: Vec<DecoderLayerParams<F>>,
    pub out_bias: Array1<F>,
}

/// Borrowed view of one parameter tensor, flat-sliceable for optimizers
/// and checkpoint writers.
pub enum TensorRef<'a, F> {
    V(&'a Array1<F>),
    M(&'a Array2<F>),
}

pub enum TensorMut<'a, F> {
    V(&'a mut Array1<F>),
    M(&'a mut Array2<F>),
}

impl<F: Scalar> TensorRef<'_, F> {
    pub fn as_slice(&self) -> &[F] {
        match self {
            TensorRef::V(a) => a.as_slice().expect("parameter tensors are contiguous"),
            TensorRef::M(a) => a.as_slice().expect("parameter tensors are contiguous"),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        match self {
            TensorRef::V(a) => a.shape().to_vec(),
            TensorRef::M(a) => a.shape().to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorRef::V(a) => a.len(),
            TensorRef::M(a) => a.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<F: Scalar> TensorMut<'_, F> {
    pub fn as_slice_mut(&mut self) -> &mut [F] {
        match self {
            TensorMut::V(a) => a.as_slice_mut().expect("parameter tensors are contiguous"),
            TensorMut::M(a) => a.as_slice_mut().expect("parameter tensors are contiguous"),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorMut::V(a) => a.len(),
            TensorMut::M(a) => a.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

macro_rules! push_linear {
    ($out:ident, $prefix:expr, $p:expr, $wrap_m:expr, $wrap_v:expr) => {
        $out.push((format!("{}.w", $prefix), $wrap_m(&$p.w)));
        $out.push((format!("{}.b", $prefix), $wrap_v(&$p.b)));
    };
}

macro_rules! push_ln {
    ($out:ident, $prefix:expr, $p:expr, $wrap_v:expr) => {
        $out.push((format!("{}.gamma", $prefix), $wrap_v(&$p.gamma)));
        $out.push((format!("{}.beta", $prefix), $wrap_v(&$p.beta)));
    };
}

macro_rules! push_attn {
    ($out:ident, $prefix:expr, $p:expr, $wrap_m:expr, $wrap_v:expr) => {
        push_linear!($out, format!("{}.q", $prefix), $p.q, $wrap_m, $wrap_v);
        push_linear!($out, format!("{}.k", $prefix), $p.k, $wrap_m, $wrap_v);
        push_linear!($out, format!("{}.v", $prefix), $p.v, $wrap_m, $wrap_v);
        push_linear!($out, format!("{}.o", $prefix), $p.o, $wrap_m, $wrap_v);
    };
}

// The shared and mutable visitors must walk tensors in the same order;
// both are generated from this macro so they cannot drift apart.
macro_rules! impl_tensors {
    ($fn_name:ident, $self_ty:ty, $ref_ty:ident, $wrap_m:expr, $wrap_v:expr, $iter:ident) => {
        pub fn $fn_name(self: $self_ty) -> Vec<(String, $ref_ty<'_, F>)> {
            let mut out: Vec<(String, $ref_ty<'_, F>)> = Vec::new();
            out.push(("emb.token".to_string(), $wrap_m(&self.emb.token)));
            out.push(("emb.position".to_string(), $wrap_m(&self.emb.position)));
            push_ln!(out, "emb.ln", self.emb.ln, $wrap_v);
            for (i, layer) in self.layers.$iter().enumerate() {
                layer.push_tensors(i, &mut out);
            }
            out.push(("out_bias".to_string(), $wrap_v(&self.out_bias)));
            out
        }
    };
}

impl<F: Scalar> EncoderLayerParams<F> {
    fn push_tensors<'a>(&'a self, i: usize, out: &mut Vec<(String, TensorRef<'a, F>)>) {
        push_attn!(out, format!("layers.{i}.attn"), self.attn, TensorRef::M, TensorRef::V);
        push_ln!(out, format!("layers.{i}.ln1"), self.ln1, TensorRef::V);
        push_linear!(out, format!("layers.{i}.ffn_in"), self.ffn_in, TensorRef::M, TensorRef::V);
        push_linear!(out, format!("layers.{i}.ffn_out"), self.ffn_out, TensorRef::M, TensorRef::V);
        push_ln!(out, format!("layers.{i}.ln2"), self.ln2, TensorRef::V);
    }
}

impl<F: Scalar> DecoderLayerParams<F> {
    fn push_tensors<'a>(&'a self, i: usize, out: &mut Vec<(String, TensorRef<'a, F>)>) {
        push_attn!(out, format!("layers.{i}.attn"), self.self_attn, TensorRef::M, TensorRef::V);
        push_ln!(out, format!("layers.{i}.ln1"), self.ln1, TensorRef::V);
        push_attn!(out, format!("layers.{i}.cross"), self.cross_attn, TensorRef::M, TensorRef::V);
        push_ln!(out, format!("layers.{i}.ln_cross"), self.ln_cross, TensorRef::V);
        push_linear!(out, format!("layers.{i}.ffn_in"), self.ffn_in, TensorRef::M, TensorRef::V);
        push_linear!(out, format!("layers.{i}.ffn_out"), self.ffn_out, TensorRef::M, TensorRef::V);
        push_ln!(out, format!("layers.{i}.ln2"), self.ln2, TensorRef::V);
    }
}

impl<F: Scalar> EncoderParams<F> {
    impl_tensors!(tensors, &Self, TensorRef, TensorRef::M, TensorRef::V, iter);

    pub fn tensors_mut(&mut self) -> Vec<(String, TensorMut<'_, F>)> {
        let mut out: Vec<(String, TensorMut<'_, F>)> = Vec::new();
        out.push(("emb.token".to_string(), TensorMut::M(&mut self.emb.token)));
        out.push(("emb.position".to_string(), TensorMut::M(&mut self.emb.position)));
        out.push(("emb.ln.gamma".to_string(), TensorMut::V(&mut self.emb.ln.gamma)));
        out.push(("emb.ln.beta".to_string(), TensorMut::V(&mut self.emb.ln.beta)));
        for (i, layer) in self.layers.iter_mut().enumerate() {
            push_layer_mut_enc(i, layer, &mut out);
        }
        out.push(("out_bias".to_string(), TensorMut::V(&mut self.out_bias)));
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

impl<F: Scalar> DecoderParams<F> {
    impl_tensors!(tensors, &Self, TensorRef, TensorRef::M, TensorRef::V, iter);

    pub fn tensors_mut(&mut self) -> Vec<(String, TensorMut<'_, F>)> {
        let mut out: Vec<(String, TensorMut<'_, F>)> = Vec::new();
        out.push(("emb.token".to_string(), TensorMut::M(&mut self.emb.token)));
        out.push(("emb.position".to_string(), TensorMut::M(&mut self.emb.position)));
        out.push(("emb.ln.gamma".to_string(), TensorMut::V(&mut self.emb.ln.gamma)));
        out.push(("emb.ln.beta".to_string(), TensorMut::V(&mut self.emb.ln.beta)));
        for (i, layer) in self.layers.iter_mut().enumerate() {
            push_layer_mut_dec(i, layer, &mut out);
        }
        out.push(("out_bias".to_string(), TensorMut::V(&mut self.out_bias)));
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

fn push_linear_mut<'a, F: Scalar>(
    prefix: String,
    p: &'a mut LinearParams<F>,
    out: &mut Vec<(String, TensorMut<'a, F>)>,
) {
    out.push((format!("{prefix}.w"), TensorMut::M(&mut p.w)));
    out.push((format!("{prefix}.b"), TensorMut::V(&mut p.b)));
}

fn push_ln_mut<'a, F: Scalar>(
    prefix: String,
    p: &'a mut LayerNormParams<F>,
    out: &mut Vec<(String, TensorMut<'a, F>)>,
) {
    out.push((format!("{prefix}.gamma"), TensorMut::V(&mut p.gamma)));
    out.push((format!("{prefix}.beta"), TensorMut::V(&mut p.beta)));
}

fn push_attn_mut<'a, F: Scalar>(
    prefix: &str,
    p: &'a mut AttentionParams<F>,
    out: &mut Vec<(String, TensorMut<'a, F>)>,
) {
    push_linear_mut(format!("{prefix}.q"), &mut p.q, out);
    push_linear_mut(format!("{prefix}.k"), &mut p.k, out);
    push_linear_mut(format!("{prefix}.v"), &mut p.v, out);
    push_linear_mut(format!("{prefix}.o"), &mut p.o, out);
}

fn push_layer_mut_enc<'a, F: Scalar>(
    i: usize,
    layer: &'a mut EncoderLayerParams<F>,
    out: &mut Vec<(String, TensorMut<'a, F>)>,
) {
    push_attn_mut(&format!("layers.{i}.attn"), &mut layer.attn, out);
    push_ln_mut(format!("layers.{i}.ln1"), &mut layer.ln1, out);
    push_linear_mut(format!("layers.{i}.ffn_in"), &mut layer.ffn_in, out);
    push_linear_mut(format!("layers.{i}.ffn_out"), &mut layer.ffn_out, out);
    push_ln_mut(format!("layers.{i}.ln2"), &mut layer.ln2, out);
}

fn push_layer_mut_dec<'a, F: Scalar>(
    i: usize,
    layer: &'a mut DecoderLayerParams<F>,
    out: &mut Vec<(String, TensorMut<'a, F>)>,
) {
    push_attn_mut(&format!("layers.{i}.attn"), &mut layer.self_attn, out);
    push_ln_mut(format!("layers.{i}.ln1"), &mut layer.ln1, out);
    push_attn_mut(&format!("layers.{i}.cross"), &mut layer.cross_attn, out);
    push_ln_mut(format!("layers.{i}.ln_cross"), &mut layer.ln_cross, out);
    push_linear_mut(format!("layers.{i}.ffn_in"), &mut layer.ffn_in, out);
    push_linear_mut(format!("layers.{i}.ffn_out"), &mut layer.ffn_out, out);
    push_ln_mut(format!("layers.{i}.ln2"), &mut layer.ln2, out);
}

/// Draws from a normal with `INIT_STD`, resampling anything beyond two
/// standard deviations.
pub(crate) fn truncated_normal<F: Scalar>(rng: &mut impl Rng) -> F {
    let dist = Normal::new(0.0f64, INIT_STD).expect("constant std is valid");
    loop {
        let x = dist.sample(rng);
        if x.abs() <= 2.0 * INIT_STD {
            return F::from_f64(x).expect("draw is finite");
        }
    }
}

fn init_linear<F: Scalar>(rows: usize, cols: usize, rng: &mut impl Rng) -> LinearParams<F> {
    LinearParams {
        w: Array2::from_shape_fn((rows, cols), |_| truncated_normal(rng)),
        b: Array1::zeros(cols),
    }
}

fn init_ln<F: Scalar>(h: usize) -> LayerNormParams<F> {
    LayerNormParams { gamma: Array1::ones(h), beta: Array1::zeros(h) }
}

fn init_attn<F: Scalar>(h: usize, rng: &mut impl Rng) -> AttentionParams<F> {
    AttentionParams {
        q: init_linear(h, h, rng),
        k: init_linear(h, h, rng),
        v: init_linear(h, h, rng),
        o: init_linear(h, h, rng),
    }
}

fn init_embedding<F: Scalar>(cfg: &ModelConfig, rng: &mut impl Rng) -> EmbeddingParams<F> {
    EmbeddingParams {
        token: Array2::from_shape_fn((cfg.vocab_size, cfg.hidden), |_| truncated_normal(rng)),
        position: Array2::from_shape_fn((cfg.max_positions, cfg.hidden), |_| {
            truncated_normal(rng)
        }),
        ln: init_ln(cfg.hidden),
    }
}

impl<F: Scalar> EncoderParams<F> {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb = init_embedding(cfg, &mut rng);
        let layers = (0..cfg.layers)
            .map(|_| EncoderLayerParams {
                attn: init_attn(cfg.hidden, &mut rng),
                ln1: init_ln(cfg.hidden),
                ffn_in: init_linear(cfg.hidden, cfg.ffn, &mut rng),
                ffn_out: init_linear(cfg.ffn, cfg.hidden, &mut rng),
                ln2: init_ln(cfg.hidden),
            })
            .collect();
        EncoderParams { emb, layers, out_bias: Array1::zeros(cfg.vocab_size) }
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        let h = cfg.hidden;
        let zl = |r, c| LinearParams { w: Array2::zeros((r, c)), b: Array1::zeros(c) };
        let zn = || LayerNormParams { gamma: Array1::zeros(h), beta: Array1::zeros(h) };
        let za = || AttentionParams { q: zl(h, h), k: zl(h, h), v: zl(h, h), o: zl(h, h) };
        EncoderParams {
            emb: EmbeddingParams {
                token: Array2::zeros((cfg.vocab_size, h)),
                position: Array2::zeros((cfg.max_positions, h)),
                ln: zn(),
            },
            layers: (0..cfg.layers)
                .map(|_| EncoderLayerParams {
                    attn: za(),
                    ln1: zn(),
                    ffn_in: zl(h, cfg.ffn),
                    ffn_out: zl(cfg.ffn, h),
                    ln2: zn(),
                })
                .collect(),
            out_bias: Array1::zeros(cfg.vocab_size),
        }
    }
}

impl<F: Scalar> DecoderParams<F> {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb = init_embedding(cfg, &mut rng);
        let layers = (0..cfg.layers)
            .map(|_| DecoderLayerParams {
                self_attn: init_attn(cfg.hidden, &mut rng),
                ln1: init_ln(cfg.hidden),
                cross_attn: init_attn(cfg.hidden, &mut rng),
                ln_cross: init_ln(cfg.hidden),
                ffn_in: init_linear(cfg.hidden, cfg.ffn, &mut rng),
                ffn_out: init_linear(cfg.ffn, cfg.hidden, &mut rng),
                ln2: init_ln(cfg.hidden),
            })
            .collect();
        DecoderParams { emb, layers, out_bias: Array1::zeros(cfg.vocab_size) }
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        let h = cfg.hidden;
        let zl = |r, c| LinearParams { w: Array2::zeros((r, c)), b: Array1::zeros(c) };
        let zn = || LayerNormParams { gamma: Array1::zeros(h), beta: Array1::zeros(h) };
        let za = || AttentionParams { q: zl(h, h), k: zl(h, h), v: zl(h, h), o: zl(h, h) };
        DecoderParams {
            emb: EmbeddingParams {
                token: Array2::zeros((cfg.vocab_size, h)),
                position: Array2::zeros((cfg.max_positions, h)),
                ln: zn(),
            },
            layers: (0..cfg.layers)
                .map(|_| DecoderLayerParams {
                    self_attn: za(),
                    ln1: zn(),
                    cross_attn: za(),
                    ln_cross: zn(),
                    ffn_in: zl(h, cfg.ffn),
                    ffn_out: zl(cfg.ffn, h),
                    ln2: zn(),
                })
                .collect(),
            out_bias: Array1::zeros(cfg.vocab_size),
        }
    }
}
