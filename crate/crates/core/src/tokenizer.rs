//! Subword vocabulary induction and greedy longest-match tokenization.
//!
//! Continuation pieces carry the `##` prefix, so any word splits into
//! pieces that rejoin losslessly. The pretokenizer keeps codec artifacts
//! (`<dbr_X>`, `count(var_x)`, literal pieces, numbers) atomic: they reach
//! the subword layer as single units and survive a tokenize/detokenize
//! round trip without spacing damage.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const MASK_ID: u32 = 4;

const SPECIALS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];

/// Pairs below this frequency are never merged during training.
const MIN_PAIR_COUNT: u64 = 2;

#[derive(Debug, thiserror::Error)]
pub enum TokenizerError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),
}

/// Token table with dense ids. The five special tokens occupy ids 0..=4 in
/// a fixed order; everything downstream (padding, masking, sequence
/// framing) relies on those ids.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from an ordered token list that must start with
    /// the five specials and contain no duplicates.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self, TokenizerError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        for (i, want) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*want) {
                return Err(TokenizerError::InvalidVocab(format!(
                    "token {i} must be {want}"
                )));
            }
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(TokenizerError::InvalidVocab(format!(
                    "token {i:?} is empty or contains whitespace"
                )));
            }
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(TokenizerError::InvalidVocab(format!("duplicate token '{t}'")));
            }
        }
        Ok(Vocab { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token_to_id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn id_to_token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        let mut out = String::new();
        for t in &self.tokens {
            writeln!(out, "{t}").expect("writing to a String cannot fail");
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let text = std::fs::read_to_string(path)?;
        Vocab::from_tokens(text.lines().filter(|l| !l.is_empty()))
    }
}

/// Splits text into the atoms the subword layer sees. Whitespace separates
/// chunks; a chunk stays whole when it is an angle-bracketed IRI token, a
/// fused aggregate call, a literal piece, or a number. Anything else splits
/// into alphanumeric-or-underscore runs and single punctuation characters.
pub fn pretokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        if is_atomic(chunk) {
            out.push(chunk.to_string());
            continue;
        }
        let mut run = String::new();
        for c in chunk.chars() {
            if c.is_alphanumeric() || c == '_' {
                run.push(c);
            } else {
                if !run.is_empty() {
                    out.push(std::mem::take(&mut run));
                }
                out.push(c.to_string());
            }
        }
        if !run.is_empty() {
            out.push(run);
        }
    }
    out
}

fn is_atomic(chunk: &str) -> bool {
    if chunk.len() >= 2 && chunk.starts_with('<') && chunk.ends_with('>') {
        return true;
    }
    if chunk.contains('"') || chunk.contains('\'') {
        return true;
    }
    // fused aggregate: letters, then a parenthesised argument
    if let Some(open) = chunk.find('(') {
        if open > 0
            && chunk.ends_with(')')
            && chunk[..open].chars().all(|c| c.is_ascii_alphabetic())
        {
            return true;
        }
    }
    let mut dots = 0;
    if !chunk.is_empty()
        && chunk.chars().all(|c| {
            if c == '.' {
                dots += 1;
            }
            c.is_ascii_digit() || c == '.'
        })
        && dots <= 1
        && !chunk.starts_with('.')
        && !chunk.ends_with('.')
    {
        return true;
    }
    false
}

/// Greedy pair-merge vocabulary training. Word frequencies come from the
/// pretokenized corpus; each round merges the most frequent adjacent
/// symbol pair (ties to the lexicographically smallest pair) until
/// `vocab_size` tokens exist or no pair reaches the frequency floor.
pub fn train_wordpiece<I, S>(lines: I, vocab_size: usize) -> Vocab
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut word_freq: HashMap<Vec<String>, u64> = HashMap::new();
    for line in lines {
        for word in pretokenize(line.as_ref()) {
            let symbols: Vec<String> = word
                .chars()
                .enumerate()
                .map(|(i, c)| if i == 0 { c.to_string() } else { format!("##{c}") })
                .collect();
            *word_freq.entry(symbols).or_insert(0) += 1;
        }
    }

    let mut alphabet: Vec<String> = word_freq
        .keys()
        .flat_map(|w| w.iter().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    alphabet.sort();

    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.extend(alphabet);
    tokens.truncate(vocab_size.max(SPECIALS.len()));

    let mut words: Vec<(Vec<String>, u64)> = word_freq.into_iter().collect();
    // iteration order of the map is arbitrary; fix it for determinism
    words.sort();

    while tokens.len() < vocab_size {
        let mut pair_counts: HashMap<(&str, &str), u64> = HashMap::new();
        for (symbols, freq) in &words {
            for pair in symbols.windows(2) {
                *pair_counts.entry((&pair[0], &pair[1])).or_insert(0) += freq;
            }
        }
        let best = pair_counts
            .into_iter()
            .filter(|(_, c)| *c >= MIN_PAIR_COUNT)
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
        let Some(((a, b), _)) = best else { break };
        let merged = format!("{}{}", a, b.strip_prefix("##").unwrap_or(b));
        let (a, b) = (a.to_string(), b.to_string());
        for (symbols, _) in &mut words {
            let mut i = 0;
            while i + 1 < symbols.len() {
                if symbols[i] == a && symbols[i + 1] == b {
                    symbols[i] = merged.clone();
                    symbols.remove(i + 1);
                } else {
                    i += 1;
                }
            }
        }
        tokens.push(merged);
    }

    Vocab::from_tokens(tokens).expect("trainer emits specials first and never duplicates")
}

/// Splits text into subword pieces by greedy longest-match against the
/// vocabulary. A word with no valid segmentation becomes a single `[UNK]`.
pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<String> {
    let mut pieces = Vec::new();
    for word in pretokenize(text) {
        let start_len = pieces.len();
        let chars: Vec<char> = word.chars().collect();
        let mut i = 0;
        'outer: while i < chars.len() {
            let prefix = if i == 0 { "" } else { "##" };
            let mut j = chars.len();
            while j > i {
                let candidate: String =
                    format!("{prefix}{}", chars[i..j].iter().collect::<String>());
                if vocab.token_to_id(&candidate).is_some() {
                    pieces.push(candidate);
                    i = j;
                    continue 'outer;
                }
                j -= 1;
            }
            // no piece matched: the whole word is unknown
            pieces.truncate(start_len);
            pieces.push(UNK.to_string());
            break;
        }
    }
    pieces
}

/// Inverts `tokenize`: `##` pieces glue to their predecessor, everything
/// else joins with single spaces.
pub fn detokenize(pieces: &[String]) -> String {
    let mut out = String::new();
    for piece in pieces {
        if let Some(cont) = piece.strip_prefix("##") {
            out.push_str(cont);
        } else {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(piece);
        }
    }
    out
}

/// A tokenized sequence ready for the models: `[CLS]` ids `[SEP]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Tokenizes and frames `text` with `[CLS]`/`[SEP]`, truncating the middle
/// so the result never exceeds `max_len`.
pub fn encode_sequence(text: &str, vocab: &Vocab, max_len: usize) -> TokenSequence {
    assert!(max_len >= 2, "need room for [CLS] and [SEP]");
    let mut ids: Vec<u32> = tokenize(text, vocab)
        .iter()
        .map(|p| vocab.token_to_id(p).unwrap_or(UNK_ID))
        .collect();
    ids.truncate(max_len - 2);
    let mut framed = Vec::with_capacity(ids.len() + 2);
    framed.push(CLS_ID);
    framed.extend(ids);
    framed.push(SEP_ID);
    TokenSequence { ids: framed }
}

/// Maps ids back to token strings, dropping `[CLS]`, `[SEP]`, and `[PAD]`,
/// then rejoins subwords. Ids outside the vocabulary render as `[UNK]`.
pub fn decode_sequence(ids: &[u32], vocab: &Vocab) -> String {
    let pieces: Vec<String> = ids
        .iter()
        .filter(|&&id| id != CLS_ID && id != SEP_ID && id != PAD_ID)
        .map(|&id| vocab.id_to_token(id).unwrap_or(UNK).to_string())
        .collect();
    detokenize(&pieces)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab_of(extra: &[&str]) -> Vocab {
        Vocab::from_tokens(SPECIALS.iter().copied().chain(extra.iter().copied())).unwrap()
    }

    #[test]
    fn specials_have_pinned_ids() {
        let v = vocab_of(&[]);
        assert_eq!(v.token_to_id(PAD), Some(0));
        assert_eq!(v.token_to_id(UNK), Some(1));
        assert_eq!(v.token_to_id(CLS), Some(2));
        assert_eq!(v.token_to_id(SEP), Some(3));
        assert_eq!(v.token_to_id(MASK), Some(4));
    }

    #[test]
    fn from_tokens_rejects_bad_tables() {
        assert!(Vocab::from_tokens(["[PAD]", "[UNK]"]).is_err());
        assert!(Vocab::from_tokens(
            SPECIALS.iter().copied().chain(["dup", "dup"])
        )
        .is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = vocab_of(&["who", "##o", "var_uri"]);
        v.save(&path).unwrap();
        let loaded = Vocab::load(&path).unwrap();
        assert_eq!(loaded.len(), v.len());
        assert_eq!(loaded.token_to_id("var_uri"), v.token_to_id("var_uri"));
    }

    #[test]
    fn pretokenize_keeps_codec_artifacts_atomic() {
        let toks = pretokenize("select count(var_uri) where brack_open <dbr_Tom_Hanks> 12.5 \"New York\"@en");
        assert_eq!(
            toks,
            vec![
                "select",
                "count(var_uri)",
                "where",
                "brack_open",
                "<dbr_Tom_Hanks>",
                "12.5",
                "\"New",
                "York\"@en"
            ]
        );
    }

    #[test]
    fn pretokenize_splits_sentence_punctuation() {
        // the apostrophe keeps its chunk atomic (literal-piece rule);
        // plain trailing punctuation splits off
        assert_eq!(
            pretokenize("Who is Tom Hanks' wife?"),
            vec!["Who", "is", "Tom", "Hanks'", "wife", "?"]
        );
    }

    #[test]
    fn training_merges_by_frequency_with_lexicographic_ties() {
        let v = train_wordpiece(["aaab aaab aaab ab"], 20);
        // alphabet {##a, ##b, a}; merges ##aa, ##aab, aaab; (a,##b) stays
        // below the frequency floor
        let expected = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "##a", "##b", "a", "##aa", "##aab", "aaab"];
        let got: Vec<&str> = (0..v.len() as u32).map(|i| v.id_to_token(i).unwrap()).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn training_respects_the_size_budget() {
        let v = train_wordpiece(["aaab aaab aaab ab"], 9);
        assert_eq!(v.len(), 9);
        assert_eq!(v.id_to_token(8), Some("##aa"));
    }

    #[test]
    fn greedy_longest_match() {
        let v = vocab_of(&["un", "##aff", "##able", "##a", "a"]);
        assert_eq!(tokenize("unaffable", &v), vec!["un", "##aff", "##able"]);
        // longest match first: "a" then "##a" twice, never [UNK]
        assert_eq!(tokenize("aaa", &v), vec!["a", "##a", "##a"]);
    }

    #[test]
    fn unsegmentable_word_becomes_unk() {
        let v = vocab_of(&["un", "##aff"]);
        assert_eq!(tokenize("unaffable", &v), vec![UNK]);
        assert_eq!(tokenize("zzz", &v), vec![UNK]);
    }

    #[test]
    fn tokenize_detokenize_round_trip_on_encoded_queries() {
        let text = "select distinct var_uri where brack_open <dbr_Tom_Hanks> <dbo_spouse> var_uri brack_close";
        let v = train_wordpiece([text], 200);
        let pieces = tokenize(text, &v);
        assert_eq!(detokenize(&pieces), text);
    }

    #[test]
    fn encode_sequence_frames_and_truncates() {
        let v = vocab_of(&["who", "is", "he"]);
        let seq = encode_sequence("who is he", &v, 16);
        assert_eq!(seq.ids.first(), Some(&CLS_ID));
        assert_eq!(seq.ids.last(), Some(&SEP_ID));
        assert_eq!(seq.len(), 5);
        let tight = encode_sequence("who is he", &v, 4);
        assert_eq!(tight.ids.len(), 4);
        assert_eq!(tight.ids.last(), Some(&SEP_ID));
        assert_eq!(decode_sequence(&tight.ids, &v), "who is");
    }

    #[test]
    fn decode_sequence_drops_framing_and_padding() {
        let v = vocab_of(&["who", "is", "he"]);
        let seq = encode_sequence("who is he", &v, 16);
        let mut padded = seq.ids.clone();
        padded.extend([PAD_ID, PAD_ID]);
        assert_eq!(decode_sequence(&padded, &v), "who is he");
    }
}
