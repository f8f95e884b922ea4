//! Finite-difference verification shared by the gradient test and the
//! acceptance suite. Both chains sweep every parameter coordinate of a
//! small model in 64-bit arithmetic and report the worst relative error
//! against central differences of the actual training loss.

#![allow(dead_code)]

use ndarray::Array2;
use sparqlgen::corruption::IGNORE_LABEL;
use sparqlgen::model::{
    decoder_backward, decoder_forward, encoder_backward, encoder_forward, lm_logits,
    lm_logits_backward, masked_cross_entropy, DecoderParams, EncoderParams, ModelConfig,
};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

/// The check runs on a 2-layer, 16-wide, 2-head model over a vocabulary
/// of 50 and sequences of length 8.
pub fn fd_config() -> ModelConfig {
    ModelConfig::new(50, 16, 2, 2, 32, 8).unwrap()
}

/// Relative error with a floored denominator: coordinates whose gradient
/// is below the floor are effectively compared absolutely at 1e-9, the
/// precision central differences can certify at this step size.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

fn perturb_encoder(p: &mut EncoderParams<f64>, tensor: usize, coord: usize, delta: f64) {
    let mut tensors = p.tensors_mut();
    tensors[tensor].1.as_slice_mut()[coord] += delta;
}

fn perturb_decoder(p: &mut DecoderParams<f64>, tensor: usize, coord: usize, delta: f64) {
    let mut tensors = p.tensors_mut();
    tensors[tensor].1.as_slice_mut()[coord] += delta;
}

/// Sweeps every encoder parameter against the two-part denoising loss.
/// Returns the worst relative error and the coordinate it occurred at.
pub fn encoder_chain_worst_error() -> (f64, String) {
    let config = fd_config();
    let params = EncoderParams::<f64>::init(&config, 31);
    let ids: Vec<u32> = vec![2, 7, 12, 19, 7, 23, 44, 3];
    let mask_labels: Vec<u32> = {
        let mut l = vec![IGNORE_LABEL; ids.len()];
        l[2] = 12;
        l[5] = 23;
        l
    };
    let shuffle_labels: Vec<u32> = {
        let mut l = vec![IGNORE_LABEL; ids.len()];
        l[3] = 19;
        l
    };

    let loss = |p: &EncoderParams<f64>| -> f64 {
        let (h, _) = encoder_forward(p, &config, &ids, None);
        let logits = lm_logits(&h, &p.emb.token, &p.out_bias);
        let (mask_loss, _, _) = masked_cross_entropy(&logits, &mask_labels);
        let (shuffle_loss, _, _) = masked_cross_entropy(&logits, &shuffle_labels);
        mask_loss + shuffle_loss
    };

    let mut grads = EncoderParams::<f64>::zeros(&config);
    let (h, cache) = encoder_forward(&params, &config, &ids, None);
    let logits = lm_logits(&h, &params.emb.token, &params.out_bias);
    let (_, d_mask, _) = masked_cross_entropy(&logits, &mask_labels);
    let (_, d_shuffle, _) = masked_cross_entropy(&logits, &shuffle_labels);
    let d_logits: Array2<f64> = &d_mask + &d_shuffle;
    let d_h = lm_logits_backward(
        &d_logits,
        &h,
        &params.emb.token,
        &mut grads.emb.token,
        &mut grads.out_bias,
    );
    encoder_backward(&params, &config, &cache, &d_h, &mut grads);

    let mut worst = 0f64;
    let mut worst_at = String::new();
    let shapes: Vec<(String, usize)> =
        params.tensors().into_iter().map(|(name, t)| (name, t.len())).collect();
    let mut work = params.clone();
    for (k, (name, len)) in shapes.iter().enumerate() {
        for i in 0..*len {
            perturb_encoder(&mut work, k, i, FD_STEP);
            let up = loss(&work);
            perturb_encoder(&mut work, k, i, -2.0 * FD_STEP);
            let down = loss(&work);
            perturb_encoder(&mut work, k, i, FD_STEP);
            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = grads.tensors()[k].1.as_slice()[i];
            let err = rel_err(analytic, numeric);
            if err > worst {
                worst = err;
                worst_at = format!("{name}[{i}]");
            }
        }
    }
    (worst, worst_at)
}

/// Sweeps every decoder and encoder parameter against the teacher-forced
/// translation loss, exercising the gradient path through cross-attention
/// back into the encoder. Returns the worst relative error and its
/// coordinate.
pub fn seq2seq_chain_worst_error() -> (f64, String) {
    let config = fd_config();
    let encoder = EncoderParams::<f64>::init(&config, 41);
    let decoder = DecoderParams::<f64>::init(&config, 42);
    let src: Vec<u32> = vec![2, 31, 9, 40, 17, 5, 28, 3];
    let tgt: Vec<u32> = vec![2, 14, 33, 8, 26, 47, 3];
    let dec_in = &tgt[..tgt.len() - 1];
    let labels = &tgt[1..];

    let loss = |e: &EncoderParams<f64>, d: &DecoderParams<f64>| -> f64 {
        let (enc_h, _) = encoder_forward(e, &config, &src, None);
        let (h, _) = decoder_forward(d, &config, dec_in, &enc_h, None);
        let logits = lm_logits(&h, &d.emb.token, &d.out_bias);
        masked_cross_entropy(&logits, labels).0
    };

    let mut enc_grads = EncoderParams::<f64>::zeros(&config);
    let mut dec_grads = DecoderParams::<f64>::zeros(&config);
    let (enc_h, enc_cache) = encoder_forward(&encoder, &config, &src, None);
    let (h, dec_cache) = decoder_forward(&decoder, &config, dec_in, &enc_h, None);
    let logits = lm_logits(&h, &decoder.emb.token, &decoder.out_bias);
    let (_, d_logits, _) = masked_cross_entropy(&logits, labels);
    let d_h = lm_logits_backward(
        &d_logits,
        &h,
        &decoder.emb.token,
        &mut dec_grads.emb.token,
        &mut dec_grads.out_bias,
    );
    let d_enc_h = decoder_backward(&decoder, &config, &dec_cache, &d_h, &mut dec_grads);
    encoder_backward(&encoder, &config, &enc_cache, &d_enc_h, &mut enc_grads);

    let mut worst = 0f64;
    let mut worst_at = String::new();

    let dec_shapes: Vec<(String, usize)> =
        decoder.tensors().into_iter().map(|(name, t)| (name, t.len())).collect();
    let mut dec_work = decoder.clone();
    for (k, (name, len)) in dec_shapes.iter().enumerate() {
        for i in 0..*len {
            perturb_decoder(&mut dec_work, k, i, FD_STEP);
            let up = loss(&encoder, &dec_work);
            perturb_decoder(&mut dec_work, k, i, -2.0 * FD_STEP);
            let down = loss(&encoder, &dec_work);
            perturb_decoder(&mut dec_work, k, i, FD_STEP);
            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = dec_grads.tensors()[k].1.as_slice()[i];
            let err = rel_err(analytic, numeric);
            if err > worst {
                worst = err;
                worst_at = format!("decoder {name}[{i}]");
            }
        }
    }

    let enc_shapes: Vec<(String, usize)> =
        encoder.tensors().into_iter().map(|(name, t)| (name, t.len())).collect();
    let mut enc_work = encoder.clone();
    for (k, (name, len)) in enc_shapes.iter().enumerate() {
        for i in 0..*len {
            perturb_encoder(&mut enc_work, k, i, FD_STEP);
            let up = loss(&enc_work, &decoder);
            perturb_encoder(&mut enc_work, k, i, -2.0 * FD_STEP);
            let down = loss(&enc_work, &decoder);
            perturb_encoder(&mut enc_work, k, i, FD_STEP);
            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = enc_grads.tensors()[k].1.as_slice()[i];
            let err = rel_err(analytic, numeric);
            if err > worst {
                worst = err;
                worst_at = format!("encoder {name}[{i}]");
            }
        }
    }
    (worst, worst_at)
}
