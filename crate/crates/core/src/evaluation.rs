//! Corpus-level BLEU and exact match.
//!
//! BLEU aggregates clipped n-gram counts over the whole corpus before
//! dividing, takes the geometric mean of the four precisions, and applies
//! the brevity penalty `exp(1 - r/c)` when the candidates are shorter than
//! the references. The default is unsmoothed: any order with zero matches
//! zeroes the score. Add-one smoothing for orders two and up is available
//! behind a flag. An order with no candidate n-grams at all (every
//! candidate shorter than `n`) scores zero either way; smoothing rescues
//! empty numerators, not empty denominators.
//!
//! The test module carries a second, deliberately naive BLEU written
//! straight from the textbook definition; the fast implementation must
//! agree with it to four decimal places on random corpora.

use serde::Serialize;
use std::collections::HashMap;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("{candidates} candidates against {references} references")]
    LengthMismatch { candidates: usize, references: usize },
    #[error("empty corpus")]
    EmptyCorpus,
}

pub const BLEU_ORDER: usize = 4;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct BleuScore {
    /// Scaled to `[0, 100]`.
    pub bleu: f64,
    pub per_ngram_precisions: [f64; BLEU_ORDER],
    pub brevity_penalty: f64,
}

/// Everything the evaluate command reports.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub bleu: f64,
    pub exact_match: f64,
    pub n_samples: usize,
    pub per_ngram_precisions: [f64; BLEU_ORDER],
    pub brevity_penalty: f64,
}

fn ngram_counts<'a>(tokens: &'a [String], n: usize) -> HashMap<&'a [String], usize> {
    let mut counts = HashMap::new();
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// Corpus BLEU over whitespace-token sequences, one reference per
/// candidate.
pub fn corpus_bleu(
    candidates: &[Vec<String>],
    references: &[Vec<String>],
    smoothing: bool,
) -> Result<BleuScore, EvalError> {
    if candidates.len() != references.len() {
        return Err(EvalError::LengthMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    if candidates.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }

    let mut matched = [0usize; BLEU_ORDER];
    let mut total = [0usize; BLEU_ORDER];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (cand, reference) in candidates.iter().zip(references) {
        cand_len += cand.len();
        ref_len += reference.len();
        for n in 1..=BLEU_ORDER {
            if cand.len() < n {
                continue;
            }
            total[n - 1] += cand.len() - n + 1;
            let ref_counts = ngram_counts(reference, n);
            for (gram, count) in ngram_counts(cand, n) {
                matched[n - 1] += count.min(*ref_counts.get(gram).unwrap_or(&0));
            }
        }
    }

    let mut precisions = [0f64; BLEU_ORDER];
    for n in 0..BLEU_ORDER {
        precisions[n] = if total[n] == 0 {
            0.0
        } else if smoothing && n > 0 {
            (matched[n] + 1) as f64 / (total[n] + 1) as f64
        } else {
            matched[n] as f64 / total[n] as f64
        };
    }

    let brevity_penalty = if cand_len == 0 {
        0.0
    } else if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };

    let bleu = if precisions.iter().any(|&p| p == 0.0) || brevity_penalty == 0.0 {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / BLEU_ORDER as f64;
        100.0 * brevity_penalty * log_mean.exp()
    };

    Ok(BleuScore { bleu, per_ngram_precisions: precisions, brevity_penalty })
}

fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Fraction of candidates equal to their reference. With `normalize`,
/// strings are compared after whitespace collapsing.
pub fn exact_match(
    candidates: &[String],
    references: &[String],
    normalize: bool,
) -> Result<f64, EvalError> {
    if candidates.len() != references.len() {
        return Err(EvalError::LengthMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    if candidates.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let hits = candidates
        .iter()
        .zip(references)
        .filter(|(c, r)| {
            if normalize {
                collapse_whitespace(c) == collapse_whitespace(r)
            } else {
                c == r
            }
        })
        .count();
    Ok(hits as f64 / candidates.len() as f64)
}

/// Scores candidate lines against reference lines: BLEU on
/// whitespace-split tokens, exact match on the (normalized) strings.
pub fn evaluate_lines(
    candidates: &[String],
    references: &[String],
    smoothing: bool,
    normalize_em: bool,
) -> Result<EvalReport, EvalError> {
    let tokenize =
        |lines: &[String]| -> Vec<Vec<String>> {
            lines
                .iter()
                .map(|l| l.split_whitespace().map(str::to_string).collect())
                .collect()
        };
    let bleu = corpus_bleu(&tokenize(candidates), &tokenize(references), smoothing)?;
    let em = exact_match(candidates, references, normalize_em)?;
    Ok(EvalReport {
        bleu: bleu.bleu,
        exact_match: em,
        n_samples: candidates.len(),
        per_ngram_precisions: bleu.per_ngram_precisions,
        brevity_penalty: bleu.brevity_penalty,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    /// Naive BLEU, written independently against the definition: for each
    /// order, walk every candidate position, count occurrences by direct
    /// slice comparison, clip against the reference counted the same way.
    fn oracle_bleu(candidates: &[Vec<String>], references: &[Vec<String>]) -> f64 {
        fn occurrences(haystack: &[String], needle: &[String]) -> usize {
            if haystack.len() < needle.len() {
                return 0;
            }
            (0..=haystack.len() - needle.len())
                .filter(|&i| &haystack[i..i + needle.len()] == needle)
                .count()
        }
        let mut log_sum = 0.0;
        for n in 1..=4 {
            let mut matched = 0usize;
            let mut total = 0usize;
            for (cand, reference) in candidates.iter().zip(references) {
                if cand.len() < n {
                    continue;
                }
                let mut seen: Vec<&[String]> = Vec::new();
                for i in 0..=cand.len() - n {
                    let gram = &cand[i..i + n];
                    total += 1;
                    if seen.contains(&gram) {
                        continue;
                    }
                    seen.push(gram);
                    matched += occurrences(cand, gram).min(occurrences(reference, gram));
                }
            }
            if matched == 0 || total == 0 {
                return 0.0;
            }
            log_sum += (matched as f64 / total as f64).ln() / 4.0;
        }
        let c: usize = candidates.iter().map(Vec::len).sum();
        let r: usize = references.iter().map(Vec::len).sum();
        let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
        100.0 * bp * log_sum.exp()
    }

    #[test]
    fn identical_corpora_score_one_hundred() {
        let corpus =
            vec![toks("select var_a where brack_open"), toks("ask where brack_open brack_close")];
        let score = corpus_bleu(&corpus, &corpus, false).unwrap();
        assert!((score.bleu - 100.0).abs() < 1e-9);
        assert_eq!(score.per_ngram_precisions, [1.0; 4]);
        assert_eq!(score.brevity_penalty, 1.0);
    }

    #[test]
    fn the_truncated_query_example_scores_as_derived_by_hand() {
        let cand = vec![toks("select distinct var_uri where")];
        let reference = vec![toks("select distinct var_uri where brack_open")];
        let score = corpus_bleu(&cand, &reference, false).unwrap();
        // every candidate n-gram appears in the reference, so the four
        // precisions are perfect and the whole score is the brevity
        // penalty exp(1 - 5/4)
        assert_eq!(score.per_ngram_precisions, [1.0; 4]);
        assert!((score.brevity_penalty - (-0.25f64).exp()).abs() < 1e-12);
        assert!((score.bleu - 77.88).abs() < 0.01);
    }

    #[test]
    fn disjoint_corpora_score_zero() {
        let cand = vec![toks("a b c d e")];
        let reference = vec![toks("v w x y z")];
        let score = corpus_bleu(&cand, &reference, false).unwrap();
        assert_eq!(score.bleu, 0.0);
        assert_eq!(score.per_ngram_precisions[0], 0.0);
    }

    #[test]
    fn smoothing_rescues_a_missing_four_gram() {
        let cand = vec![toks("a b c d e")];
        let reference = vec![toks("a b c x e")];
        let raw = corpus_bleu(&cand, &reference, false).unwrap();
        assert_eq!(raw.bleu, 0.0);
        let smoothed = corpus_bleu(&cand, &reference, true).unwrap();
        // p1 = 4/5 raw; smoothed higher orders: p2 = 3/5, p3 = 2/4, p4 = 1/3
        assert!((smoothed.per_ngram_precisions[0] - 0.8).abs() < 1e-12);
        assert!((smoothed.per_ngram_precisions[1] - 0.6).abs() < 1e-12);
        assert!((smoothed.per_ngram_precisions[2] - 0.5).abs() < 1e-12);
        assert!((smoothed.per_ngram_precisions[3] - 1.0 / 3.0).abs() < 1e-12);
        assert!((smoothed.bleu - 53.19).abs() < 0.02);
    }

    #[test]
    fn clipping_counts_repeated_candidate_grams_against_the_reference() {
        // "the the the the" against a reference with two "the": p1 = 2/4
        let cand = vec![toks("the the the the")];
        let reference = vec![toks("the cat sat on the mat")];
        let score = corpus_bleu(&cand, &reference, false).unwrap();
        assert!((score.per_ngram_precisions[0] - 0.5).abs() < 1e-12);
        assert_eq!(score.bleu, 0.0); // no bigram "the the" in the reference
    }

    #[test]
    fn orders_with_no_candidate_ngrams_zero_the_score_even_smoothed() {
        let cand = vec![toks("ab")];
        let reference = vec![toks("ab")];
        for smoothing in [false, true] {
            let score = corpus_bleu(&cand, &reference, smoothing).unwrap();
            assert_eq!(score.per_ngram_precisions[3], 0.0);
            assert_eq!(score.bleu, 0.0);
        }
    }

    fn random_corpus(seed: u64, pairs: usize) -> (Vec<Vec<String>>, Vec<Vec<String>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let words: Vec<String> = (0..12).map(|i| format!("w{i}")).collect();
        let mut cands = Vec::new();
        let mut refs = Vec::new();
        for _ in 0..pairs {
            let len = rng.random_range(4..15);
            let reference: Vec<String> =
                (0..len).map(|_| words[rng.random_range(0..words.len())].clone()).collect();
            // mutate a copy so plenty of n-grams still overlap
            let mut cand = reference.clone();
            for slot in cand.iter_mut() {
                if rng.random::<f64>() < 0.2 {
                    *slot = words[rng.random_range(0..words.len())].clone();
                }
            }
            if rng.random::<f64>() < 0.3 {
                cand.pop();
            }
            cands.push(cand);
            refs.push(reference);
        }
        (cands, refs)
    }

    #[test]
    fn agrees_with_the_naive_implementation_on_random_corpora() {
        for seed in 0..100 {
            let (cands, refs) = random_corpus(seed, 4);
            let fast = corpus_bleu(&cands, &refs, false).unwrap().bleu;
            let naive = oracle_bleu(&cands, &refs);
            assert!((fast - naive).abs() < 0.0001, "seed {seed}: {fast} vs {naive}");
        }
    }

    #[test]
    fn jointly_permuting_pairs_leaves_the_score_unchanged() {
        let (cands, refs) = random_corpus(7, 6);
        let base = corpus_bleu(&cands, &refs, false).unwrap().bleu;
        let perm = [3usize, 0, 5, 1, 4, 2];
        let cands_p: Vec<_> = perm.iter().map(|&i| cands[i].clone()).collect();
        let refs_p: Vec<_> = perm.iter().map(|&i| refs[i].clone()).collect();
        let permuted = corpus_bleu(&cands_p, &refs_p, false).unwrap().bleu;
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn exact_match_counts_whole_string_equality() {
        let refs: Vec<String> =
            ["a b", "c d", "e f", "g h"].iter().map(|s| s.to_string()).collect();
        let cands: Vec<String> =
            ["a b", "x d", "e  f", "g"].iter().map(|s| s.to_string()).collect();
        assert_eq!(exact_match(&cands, &refs, true).unwrap(), 0.5);
        assert_eq!(exact_match(&cands, &refs, false).unwrap(), 0.25);
        assert_eq!(exact_match(&refs, &refs, false).unwrap(), 1.0);
        let disjoint: Vec<String> = ["p", "q", "r", "s"].iter().map(|s| s.to_string()).collect();
        assert_eq!(exact_match(&disjoint, &refs, true).unwrap(), 0.0);
    }

    #[test]
    fn a_perfect_exact_match_implies_a_perfect_bleu() {
        let (_, refs) = random_corpus(21, 5);
        let lines: Vec<String> = refs.iter().map(|t| t.join(" ")).collect();
        let report = evaluate_lines(&lines, &lines, false, true).unwrap();
        assert_eq!(report.exact_match, 1.0);
        assert!((report.bleu - 100.0).abs() < 1e-9);
        assert_eq!(report.n_samples, 5);
    }

    #[test]
    fn mismatched_or_empty_corpora_are_rejected() {
        let a = vec![toks("x")];
        assert_eq!(
            corpus_bleu(&a, &[], false).unwrap_err(),
            EvalError::LengthMismatch { candidates: 1, references: 0 }
        );
        assert_eq!(corpus_bleu(&[], &[], false).unwrap_err(), EvalError::EmptyCorpus);
        assert_eq!(exact_match(&[], &[], true).unwrap_err(), EvalError::EmptyCorpus);
    }
}
