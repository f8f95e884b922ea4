//! Optimization, checkpointing, and the two training loops.
//!
//! The optimizer walks parameter and gradient trees through their tensor
//! visitors, so it never needs to know the architecture. Checkpoints are a
//! single file: an eight-byte magic, a JSON manifest (config, kind, tensor
//! names and shapes), then the raw little-endian `f32` payload in manifest
//! order. A decoder warm start copies every same-named tensor from an
//! encoder checkpoint and leaves the tensors an encoder does not have
//! (cross-attention and its layer norms) at their fresh initialization,
//! reporting exactly what was copied, what stayed random, and what was
//! reset.
//!
//! Batch order is derived from `(seed, epoch)` alone, so a run that loads
//! a checkpoint and continues from the same epoch index sees the same
//! batches as the run that wrote it.

use crate::corruption::PretrainExample;
use crate::model::{
    decoder_backward, decoder_forward, encoder_backward, encoder_forward, lm_logits,
    lm_logits_backward, masked_cross_entropy, DecoderParams, EncoderParams, ModelConfig, Scalar,
    TensorMut, TensorRef,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file: {0}")]
    BadFormat(String),
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied directly to the parameter.
    pub weight_decay: f64,
    /// Scale gradients down when their global norm exceeds this.
    pub clip_norm: Option<f64>,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        AdamHyper { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, clip_norm: None }
    }
}

/// First and second moment accumulators, flat per tensor, aligned with the
/// visitor order of the parameter tree they serve.
pub struct AdamState<F> {
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    step: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn for_tensors(tensors: &[(String, TensorRef<'_, F>)]) -> Self {
        let m = tensors.iter().map(|(_, t)| vec![F::zero(); t.len()]).collect();
        let v = tensors.iter().map(|(_, t)| vec![F::zero(); t.len()]).collect();
        AdamState { m, v, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update with decoupled weight decay and optional
/// global-norm clipping. `params` and `grads` must come from structurally
/// identical trees.
pub fn adam_step<F: Scalar>(
    mut params: Vec<(String, TensorMut<'_, F>)>,
    grads: &[(String, TensorRef<'_, F>)],
    state: &mut AdamState<F>,
    hyper: &AdamHyper,
) {
    assert_eq!(params.len(), grads.len(), "parameter and gradient trees differ");
    let c = |x: f64| F::from_f64(x).expect("hyperparameter is finite");

    let mut norm_sq = F::zero();
    for (_, g) in grads {
        for &gi in g.as_slice() {
            norm_sq += gi * gi;
        }
    }
    let norm = norm_sq.sqrt();
    let scale = match hyper.clip_norm {
        Some(limit) if norm > c(limit) => c(limit) / norm,
        _ => F::one(),
    };

    state.step += 1;
    let t = state.step as i32;
    let b1 = c(hyper.beta1);
    let b2 = c(hyper.beta2);
    let bc1 = F::one() - b1.powi(t);
    let bc2 = F::one() - b2.powi(t);
    let lr = c(hyper.lr);
    let eps = c(hyper.eps);
    let wd = c(hyper.weight_decay);

    for (k, ((pname, p), (gname, g))) in params.iter_mut().zip(grads).enumerate() {
        assert_eq!(pname, gname, "tensor order diverged at {k}");
        let ps = p.as_slice_mut();
        let gs = g.as_slice();
        assert_eq!(ps.len(), gs.len());
        let m = &mut state.m[k];
        let v = &mut state.v[k];
        for i in 0..ps.len() {
            let gi = gs[i] * scale;
            m[i] = b1 * m[i] + (F::one() - b1) * gi;
            v[i] = b2 * v[i] + (F::one() - b2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            ps[i] = ps[i] - lr * (mhat / (vhat.sqrt() + eps) + wd * ps[i]);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Encoder,
    Decoder,
}

/// A config plus named tensors, detached from the parameter structs so it
/// can cross a process boundary.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub kind: CheckpointKind,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Debug, Clone)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

const CKPT_MAGIC: &[u8; 8] = b"SQGCKPT1";

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    kind: CheckpointKind,
    tensors: Vec<ManifestTensor>,
}

#[derive(Serialize, Deserialize)]
struct ManifestTensor {
    name: String,
    shape: Vec<usize>,
}

fn snapshot<F: Scalar>(named: Vec<(String, TensorRef<'_, F>)>) -> Vec<NamedTensor> {
    named
        .into_iter()
        .map(|(name, t)| NamedTensor {
            shape: t.shape(),
            data: t.as_slice().iter().map(|&x| x.to_f32().expect("params are f32-ranged")).collect(),
            name,
        })
        .collect()
}

fn restore<F: Scalar>(
    tensors: &[NamedTensor],
    mut targets: Vec<(String, TensorMut<'_, F>)>,
) -> Result<(), TrainError> {
    if tensors.len() != targets.len() {
        return Err(TrainError::Mismatch(format!(
            "checkpoint has {} tensors, model expects {}",
            tensors.len(),
            targets.len()
        )));
    }
    for (src, (name, dst)) in tensors.iter().zip(targets.iter_mut()) {
        if src.name != *name {
            return Err(TrainError::Mismatch(format!(
                "tensor '{}' where '{name}' was expected",
                src.name
            )));
        }
        let slice = dst.as_slice_mut();
        if src.data.len() != slice.len() {
            return Err(TrainError::Mismatch(format!(
                "tensor '{name}' holds {} values, model expects {}",
                src.data.len(),
                slice.len()
            )));
        }
        for (d, &s) in slice.iter_mut().zip(&src.data) {
            *d = F::from_f32(s).expect("f32 fits the model scalar");
        }
    }
    Ok(())
}

impl Checkpoint {
    pub fn from_encoder(config: ModelConfig, params: &EncoderParams<f32>) -> Self {
        Checkpoint { config, kind: CheckpointKind::Encoder, tensors: snapshot(params.tensors()) }
    }

    pub fn from_decoder(config: ModelConfig, params: &DecoderParams<f32>) -> Self {
        Checkpoint { config, kind: CheckpointKind::Decoder, tensors: snapshot(params.tensors()) }
    }

    pub fn into_encoder(&self) -> Result<EncoderParams<f32>, TrainError> {
        if self.kind != CheckpointKind::Encoder {
            return Err(TrainError::Mismatch("checkpoint does not hold an encoder".to_string()));
        }
        let mut params = EncoderParams::<f32>::zeros(&self.config);
        restore(&self.tensors, params.tensors_mut())?;
        Ok(params)
    }

    pub fn into_decoder(&self) -> Result<DecoderParams<f32>, TrainError> {
        if self.kind != CheckpointKind::Decoder {
            return Err(TrainError::Mismatch("checkpoint does not hold a decoder".to_string()));
        }
        let mut params = DecoderParams::<f32>::zeros(&self.config);
        restore(&self.tensors, params.tensors_mut())?;
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let manifest = Manifest {
            config: self.config,
            kind: self.kind,
            tensors: self
                .tensors
                .iter()
                .map(|t| ManifestTensor { name: t.name.clone(), shape: t.shape.clone() })
                .collect(),
        };
        let manifest_bytes = serde_json::to_vec(&manifest).map_err(std::io::Error::other)?;
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(CKPT_MAGIC)?;
        out.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
        out.write_all(&manifest_bytes)?;
        for t in &self.tensors {
            for &x in &t.data {
                out.write_all(&x.to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        file.read_exact(&mut magic)
            .map_err(|_| TrainError::BadFormat("file is too short for the magic".to_string()))?;
        if &magic != CKPT_MAGIC {
            return Err(TrainError::BadFormat("magic bytes do not match".to_string()));
        }
        let mut len_bytes = [0u8; 8];
        file.read_exact(&mut len_bytes)?;
        let manifest_len = u64::from_le_bytes(len_bytes) as usize;
        let mut manifest_bytes = vec![0u8; manifest_len];
        file.read_exact(&mut manifest_bytes)?;
        let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
            .map_err(|e| TrainError::BadFormat(format!("manifest does not parse: {e}")))?;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for mt in manifest.tensors {
            let n: usize = mt.shape.iter().product();
            let mut bytes = vec![0u8; n * 4];
            file.read_exact(&mut bytes).map_err(|_| {
                TrainError::BadFormat(format!("payload for '{}' is truncated", mt.name))
            })?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(NamedTensor { name: mt.name, shape: mt.shape, data });
        }
        let mut extra = [0u8; 1];
        if file.read(&mut extra)? != 0 {
            return Err(TrainError::BadFormat("trailing bytes after the payload".to_string()));
        }
        Ok(Checkpoint { config: manifest.config, kind: manifest.kind, tensors })
    }
}

/// What a decoder warm start did with each tensor.
#[derive(Debug, Clone, Serialize)]
pub struct WarmStartManifest {
    /// Taken verbatim from the encoder checkpoint.
    pub copied: Vec<String>,
    pub copied_params: usize,
    /// No encoder counterpart exists; kept at fresh random initialization.
    pub randomized: Vec<String>,
    pub randomized_params: usize,
    /// No encoder counterpart exists; reset to the identity transform.
    pub reset: Vec<String>,
    pub reset_params: usize,
}

/// Builds a decoder whose embedding, self-attention, feed-forward, and
/// layer-norm tensors come from an encoder, while cross-attention
/// projections stay randomly initialized (seeded) and cross-attention
/// layer norms stay at gamma one, beta zero.
pub fn init_decoder_from_encoder(
    config: &ModelConfig,
    encoder: &EncoderParams<f32>,
    seed: u64,
) -> (DecoderParams<f32>, WarmStartManifest) {
    let mut decoder = DecoderParams::<f32>::init(config, seed);
    let source: std::collections::HashMap<String, Vec<f32>> = encoder
        .tensors()
        .into_iter()
        .map(|(name, t)| (name, t.as_slice().to_vec()))
        .collect();
    let mut manifest = WarmStartManifest {
        copied: Vec::new(),
        copied_params: 0,
        randomized: Vec::new(),
        randomized_params: 0,
        reset: Vec::new(),
        reset_params: 0,
    };
    for (name, mut t) in decoder.tensors_mut() {
        match source.get(&name) {
            Some(src) => {
                let dst = t.as_slice_mut();
                assert_eq!(dst.len(), src.len(), "shape drift on shared tensor {name}");
                dst.copy_from_slice(src);
                manifest.copied_params += dst.len();
                manifest.copied.push(name);
            }
            None if name.contains(".ln_cross.") => {
                manifest.reset_params += t.len();
                manifest.reset.push(name);
            }
            None => {
                manifest.randomized_params += t.len();
                manifest.randomized.push(name);
            }
        }
    }
    (decoder, manifest)
}

#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    pub hyper: AdamHyper,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epoch index to start counting from; batch order for epoch `e` is a
    /// pure function of `(seed, e)`, which is what makes resumption see
    /// the batches the interrupted run would have seen.
    pub start_epoch: usize,
    pub seed: u64,
}

impl TrainOptions {
    pub fn new(lr: f64, batch_size: usize, epochs: usize, seed: u64) -> Self {
        TrainOptions { hyper: AdamHyper::with_lr(lr), batch_size, epochs, start_epoch: 0, seed }
    }
}

/// Epoch-keyed shuffling rng. Streams below `1 << 32` belong to the
/// corruption pass; epoch streams live above them.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((1u64 << 32) | epoch as u64);
    rng
}

fn batch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut epoch_rng(seed, epoch));
    order
}

/// Trains the encoder on corrupted sequences, summing the two denoising
/// losses over the shared tied head. Returns the per-step mean loss.
pub fn pretrain_encoder(
    params: &mut EncoderParams<f32>,
    config: &ModelConfig,
    examples: &[PretrainExample],
    opts: &TrainOptions,
) -> Vec<f32> {
    assert!(!examples.is_empty(), "nothing to train on");
    assert!(opts.batch_size > 0);
    let mut state = AdamState::for_tensors(&params.tensors());
    let mut losses = Vec::new();
    for epoch in opts.start_epoch..opts.start_epoch + opts.epochs {
        let order = batch_order(examples.len(), opts.seed, epoch);
        for batch in order.chunks(opts.batch_size) {
            let mut grads = EncoderParams::<f32>::zeros(config);
            let inv = 1.0f32 / batch.len() as f32;
            let mut batch_loss = 0.0f32;
            for &idx in batch {
                let ex = &examples[idx];
                let (h, cache) = encoder_forward(params, config, &ex.input_ids, None);
                let logits = lm_logits(&h, &params.emb.token, &params.out_bias);
                let (mask_loss, d_mask, _) = masked_cross_entropy(&logits, &ex.mask_labels);
                let (shuf_loss, d_shuf, _) = masked_cross_entropy(&logits, &ex.shuffle_labels);
                batch_loss += (mask_loss + shuf_loss) * inv;
                let d_logits = (&d_mask + &d_shuf) * inv;
                let d_h = lm_logits_backward(
                    &d_logits,
                    &h,
                    &params.emb.token,
                    &mut grads.emb.token,
                    &mut grads.out_bias,
                );
                encoder_backward(params, config, &cache, &d_h, &mut grads);
            }
            adam_step(params.tensors_mut(), &grads.tensors(), &mut state, &opts.hyper);
            losses.push(batch_loss);
        }
    }
    losses
}

/// One source-target pair of framed id sequences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqPair {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
}

/// Trains encoder and decoder jointly on translation pairs with teacher
/// forcing: the decoder reads the target minus its last token and predicts
/// the target shifted left. Returns the per-step mean loss.
pub fn finetune_seq2seq(
    encoder: &mut EncoderParams<f32>,
    decoder: &mut DecoderParams<f32>,
    config: &ModelConfig,
    pairs: &[SeqPair],
    opts: &TrainOptions,
) -> Vec<f32> {
    assert!(!pairs.is_empty(), "nothing to train on");
    assert!(opts.batch_size > 0);
    let mut enc_state = AdamState::for_tensors(&encoder.tensors());
    let mut dec_state = AdamState::for_tensors(&decoder.tensors());
    let mut losses = Vec::new();
    for epoch in opts.start_epoch..opts.start_epoch + opts.epochs {
        let order = batch_order(pairs.len(), opts.seed, epoch);
        for batch in order.chunks(opts.batch_size) {
            let mut enc_grads = EncoderParams::<f32>::zeros(config);
            let mut dec_grads = DecoderParams::<f32>::zeros(config);
            let inv = 1.0f32 / batch.len() as f32;
            let mut batch_loss = 0.0f32;
            for &idx in batch {
                let pair = &pairs[idx];
                assert!(pair.target.len() >= 2, "target needs a start and an end token");
                let (enc_h, enc_cache) = encoder_forward(encoder, config, &pair.source, None);
                let dec_in = &pair.target[..pair.target.len() - 1];
                let labels = &pair.target[1..];
                let (h, dec_cache) = decoder_forward(decoder, config, dec_in, &enc_h, None);
                let logits = lm_logits(&h, &decoder.emb.token, &decoder.out_bias);
                let (loss, d_logits, _) = masked_cross_entropy(&logits, labels);
                batch_loss += loss * inv;
                let d_logits = d_logits * inv;
                let d_h = lm_logits_backward(
                    &d_logits,
                    &h,
                    &decoder.emb.token,
                    &mut dec_grads.emb.token,
                    &mut dec_grads.out_bias,
                );
                let d_enc_h = decoder_backward(decoder, config, &dec_cache, &d_h, &mut dec_grads);
                encoder_backward(encoder, config, &enc_cache, &d_enc_h, &mut enc_grads);
            }
            adam_step(encoder.tensors_mut(), &enc_grads.tensors(), &mut enc_state, &opts.hyper);
            adam_step(decoder.tensors_mut(), &dec_grads.tensors(), &mut dec_state, &opts.hyper);
            losses.push(batch_loss);
        }
    }
    losses
}
