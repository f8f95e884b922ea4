//! Denoising corruption for pre-training: masked-token prediction plus
//! local span shuffling.
//!
//! Masking follows the 15% / 80-10-10 recipe: each content position is
//! selected independently; a selected position becomes `[MASK]`, a random
//! vocabulary token, or stays itself, and the model must restore the
//! original. Shuffling then tiles the untouched content positions into
//! fixed-size spans, permutes a ceiling fraction of them, and supervises
//! the moved positions with their original tokens. The two objectives
//! never claim the same position.

use crate::tokenizer::{TokenSequence, CLS_ID, MASK_ID, PAD_ID, SEP_ID, UNK_ID};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

/// Label value for positions that contribute no loss.
pub const IGNORE_LABEL: u32 = u32::MAX;

/// First vocabulary id that corruption may touch or draw as a replacement;
/// everything below is a special token.
const FIRST_CONTENT_ID: u32 = UNK_ID + 4;

#[derive(Debug, thiserror::Error)]
pub enum CorruptionError {
    #[error("invalid corruption config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed example on line {line}: {source}")]
    MalformedExample { line: usize, source: serde_json::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionConfig {
    /// Probability that a content position is selected for masking.
    pub mask_prob: f64,
    /// Of the selected positions: fraction replaced by `[MASK]`.
    pub mask_token_frac: f64,
    /// Of the selected positions: fraction replaced by a random token.
    pub random_frac: f64,
    /// Span length for the shuffling objective.
    pub span: usize,
    /// Fraction of candidate spans that get permuted (applied as a ceiling).
    pub shuffle_rate: f64,
}

impl CorruptionConfig {
    pub fn new(
        mask_prob: f64,
        mask_token_frac: f64,
        random_frac: f64,
        span: usize,
        shuffle_rate: f64,
    ) -> Result<Self, CorruptionError> {
        let cfg = CorruptionConfig { mask_prob, mask_token_frac, random_frac, span, shuffle_rate };
        if !(0.0..=1.0).contains(&mask_prob) || !(0.0..=1.0).contains(&shuffle_rate) {
            return Err(CorruptionError::InvalidConfig(
                "rates must lie in [0, 1]".to_string(),
            ));
        }
        if mask_token_frac < 0.0 || random_frac < 0.0 || mask_token_frac + random_frac > 1.0 {
            return Err(CorruptionError::InvalidConfig(
                "mask and random fractions must be nonnegative and sum to at most 1".to_string(),
            ));
        }
        if span < 2 {
            return Err(CorruptionError::InvalidConfig("span must be at least 2".to_string()));
        }
        Ok(cfg)
    }
}

impl Default for CorruptionConfig {
    /// 15% selection with the 80/10/10 split, trigram spans, 10% of spans
    /// shuffled.
    fn default() -> Self {
        CorruptionConfig::new(0.15, 0.8, 0.1, 3, 0.1).expect("defaults are valid")
    }
}

/// One corrupted sequence with per-position supervision. `mask_labels`
/// holds the original id at positions the masking objective selected,
/// `shuffle_labels` the original id at positions the shuffling objective
/// moved; both hold `IGNORE_LABEL` everywhere else and never overlap.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PretrainExample {
    pub input_ids: Vec<u32>,
    pub mask_labels: Vec<u32>,
    pub shuffle_labels: Vec<u32>,
}

fn is_content(id: u32) -> bool {
    id != PAD_ID && id != CLS_ID && id != SEP_ID && id != MASK_ID && id != UNK_ID
}

/// Applies the masking objective in place over a copy of `ids`. Returns the
/// corrupted ids and the label array. `vocab_size` bounds the random
/// replacement draw.
pub fn apply_mask_corruption(
    ids: &[u32],
    cfg: &CorruptionConfig,
    vocab_size: u32,
    rng: &mut impl Rng,
) -> (Vec<u32>, Vec<u32>) {
    assert!(vocab_size > FIRST_CONTENT_ID, "vocabulary has no content tokens");
    let mut corrupted = ids.to_vec();
    let mut labels = vec![IGNORE_LABEL; ids.len()];
    for (i, &id) in ids.iter().enumerate() {
        if !is_content(id) {
            continue;
        }
        if rng.random::<f64>() >= cfg.mask_prob {
            continue;
        }
        labels[i] = id;
        let roll = rng.random::<f64>();
        if roll < cfg.mask_token_frac {
            corrupted[i] = MASK_ID;
        } else if roll < cfg.mask_token_frac + cfg.random_frac {
            corrupted[i] = rng.random_range(FIRST_CONTENT_ID..vocab_size);
        }
        // otherwise the original token stands in for itself
    }
    (corrupted, labels)
}

/// Applies the span-shuffling objective to the positions the masking pass
/// left untouched. Maximal runs of untouched content positions are tiled
/// into disjoint spans of `cfg.span` tokens; `ceil(shuffle_rate * spans)`
/// of them are permuted with a non-identity index permutation. Returns the
/// shuffled ids and the label array covering moved positions.
pub fn apply_span_shuffle(
    ids: &[u32],
    mask_labels: &[u32],
    cfg: &CorruptionConfig,
    rng: &mut impl Rng,
) -> (Vec<u32>, Vec<u32>) {
    assert_eq!(ids.len(), mask_labels.len());
    let eligible: Vec<bool> = ids
        .iter()
        .zip(mask_labels)
        .map(|(&id, &lab)| is_content(id) && lab == IGNORE_LABEL)
        .collect();

    // tile each maximal eligible run into disjoint spans
    let mut spans: Vec<usize> = Vec::new(); // start positions
    let mut run_start = None;
    for i in 0..=ids.len() {
        let on = i < ids.len() && eligible[i];
        match (on, run_start) {
            (true, None) => run_start = Some(i),
            (false, Some(s)) => {
                let mut p = s;
                while p + cfg.span <= i {
                    spans.push(p);
                    p += cfg.span;
                }
                run_start = None;
            }
            _ => {}
        }
    }

    let mut shuffled = ids.to_vec();
    let mut labels = vec![IGNORE_LABEL; ids.len()];
    if spans.is_empty() {
        return (shuffled, labels);
    }
    let k = ((cfg.shuffle_rate * spans.len() as f64).ceil() as usize).min(spans.len());
    let chosen = rand::seq::index::sample(rng, spans.len(), k);
    let mut perm: Vec<usize> = (0..cfg.span).collect();
    for idx in chosen.iter() {
        let start = spans[idx];
        loop {
            perm.shuffle(rng);
            if perm.iter().enumerate().any(|(i, &p)| i != p) {
                break;
            }
        }
        let original: Vec<u32> = (0..cfg.span).map(|j| ids[start + j]).collect();
        for (j, &p) in perm.iter().enumerate() {
            shuffled[start + j] = original[p];
            labels[start + j] = original[j];
        }
    }
    (shuffled, labels)
}

/// Corrupts every sequence with an independent, order-insensitive random
/// substream: example `i` always draws from stream `i` of `seed`, so the
/// stream reproduces bit-identically and no example's draws depend on
/// another's.
pub fn make_pretrain_stream(
    sequences: &[TokenSequence],
    cfg: &CorruptionConfig,
    vocab_size: u32,
    seed: u64,
) -> Vec<PretrainExample> {
    sequences
        .iter()
        .enumerate()
        .map(|(i, seq)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let (masked, mask_labels) = apply_mask_corruption(&seq.ids, cfg, vocab_size, &mut rng);
            let (input_ids, shuffle_labels) =
                apply_span_shuffle(&masked, &mask_labels, cfg, &mut rng);
            PretrainExample { input_ids, mask_labels, shuffle_labels }
        })
        .collect()
}

/// One example per line as JSON, in stream order.
pub fn write_examples_jsonl(
    path: &Path,
    examples: &[PretrainExample],
) -> Result<(), CorruptionError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut out, ex).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_examples_jsonl(path: &Path) -> Result<Vec<PretrainExample>, CorruptionError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|source| CorruptionError::MalformedExample { line: i + 1, source })?,
        );
    }
    Ok(out)
}
