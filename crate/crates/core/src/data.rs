//! Parallel corpora, entity covering, synthetic fixtures, and run
//! configuration.
//!
//! Datasets follow the aligned-text convention: a `.en` file of questions
//! and a `.sparql` file of queries, line for line. A single TSV file with
//! one pair per line works too. Fixture generation instantiates question
//! and query templates over an entity pool, which gives the rest of the
//! pipeline a deterministic desk-scale corpus whose every query passes
//! the codec.

use crate::codec::{encode, validate_query, EncodedQuery, HostAllowlist, NamespaceTable};
use crate::corruption::CorruptionConfig;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("aligned files differ in length: {left} lines against {right}")]
    Misaligned { left: usize, right: usize },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// One question paired with one query (or answer sentence, for the
/// reverse task).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelExample {
    pub source: String,
    pub target: String,
    pub split: Split,
    /// Set once entity or answer spans have been replaced by placeholders.
    pub covered: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    /// One `source<TAB>target` pair per line.
    Tsv,
    /// `<base>.en` and `<base>.sparql`, aligned line for line.
    PairedFiles,
}

fn read_lines(path: &Path) -> Result<Vec<String>, DataError> {
    let text = std::fs::read_to_string(path)?;
    Ok(text.lines().map(str::to_string).collect())
}

fn check_nonempty(source: &str, target: &str, line: usize) -> Result<(), DataError> {
    if source.trim().is_empty() {
        return Err(DataError::Parse { line, reason: "empty source".to_string() });
    }
    if target.trim().is_empty() {
        return Err(DataError::Parse { line, reason: "empty target".to_string() });
    }
    Ok(())
}

/// Loads a parallel corpus in file order. For `PairedFiles`, `path` is the
/// base path without extension.
pub fn load_parallel(
    path: &Path,
    format: CorpusFormat,
    split: Split,
) -> Result<Vec<ParallelExample>, DataError> {
    let pairs: Vec<(String, String)> = match format {
        CorpusFormat::Tsv => {
            let mut pairs = Vec::new();
            for (i, line) in read_lines(path)?.into_iter().enumerate() {
                let (source, target) = line.split_once('\t').ok_or_else(|| DataError::Parse {
                    line: i + 1,
                    reason: "no tab separator".to_string(),
                })?;
                pairs.push((source.to_string(), target.to_string()));
            }
            pairs
        }
        CorpusFormat::PairedFiles => {
            let sources = read_lines(&path.with_extension("en"))?;
            let targets = read_lines(&path.with_extension("sparql"))?;
            if sources.len() != targets.len() {
                return Err(DataError::Misaligned { left: sources.len(), right: targets.len() });
            }
            sources.into_iter().zip(targets).collect()
        }
    };
    let mut examples = Vec::with_capacity(pairs.len());
    for (i, (source, target)) in pairs.into_iter().enumerate() {
        check_nonempty(&source, &target, i + 1)?;
        examples.push(ParallelExample { source, target, split, covered: false });
    }
    Ok(examples)
}

/// Writes `<base>.en` and `<base>.sparql`. Strings must not contain
/// newlines; the trailing newline per line is the only byte added.
pub fn save_parallel(examples: &[ParallelExample], base: &Path) -> Result<(), DataError> {
    let mut sources = String::new();
    let mut targets = String::new();
    for ex in examples {
        assert!(
            !ex.source.contains('\n') && !ex.target.contains('\n'),
            "line-oriented corpus cannot hold embedded newlines"
        );
        sources.push_str(&ex.source);
        sources.push('\n');
        targets.push_str(&ex.target);
        targets.push('\n');
    }
    std::fs::write(base.with_extension("en"), sources)?;
    std::fs::write(base.with_extension("sparql"), targets)?;
    Ok(())
}

fn entity_token(token: &str, entity_tags: &HashSet<&str>) -> bool {
    let inner = match token.strip_prefix('<').and_then(|t| t.strip_suffix('>')) {
        Some(inner) => inner,
        None => return false,
    };
    if inner.contains(':') {
        return false;
    }
    match inner.split_once('_') {
        Some((tag, _)) => entity_tags.contains(tag),
        None => false,
    }
}

/// Replaces every entity-namespace IRI token in the target query with the
/// `<ent>` placeholder, left to right.
pub fn cover_entities(ex: &ParallelExample, ns: &NamespaceTable) -> ParallelExample {
    let entity_tags: HashSet<&str> = ns.entity_tags().collect();
    let mut replaced = false;
    let target = ex
        .target
        .split_whitespace()
        .map(|tok| {
            if entity_token(tok, &entity_tags) {
                replaced = true;
                "<ent>"
            } else {
                tok
            }
        })
        .collect::<Vec<_>>()
        .join(" ");
    ParallelExample { target, covered: ex.covered || replaced, ..ex.clone() }
}

/// Replaces a bracketed answer span (`[ ... ]`) in the target sentence
/// with the `<ans>` placeholder. Sentences without exactly one such
/// marker pair are returned unchanged.
pub fn cover_answer(ex: &ParallelExample) -> ParallelExample {
    let (open, close) = match (ex.target.find('['), ex.target.rfind(']')) {
        (Some(o), Some(c)) if o < c => (o, c),
        _ => return ex.clone(),
    };
    if ex.target[open + 1..close].contains('[') {
        return ex.clone();
    }
    let target = format!("{}<ans>{}", &ex.target[..open], &ex.target[close + 1..]);
    ParallelExample { target, covered: true, ..ex.clone() }
}

/// An entity the fixture templates can be instantiated with: the surface
/// form used in questions and the resource-IRI local name.
#[derive(Debug, Clone)]
pub struct FixtureEntity {
    pub name: String,
    pub resource: String,
}

pub fn default_entity_pool() -> Vec<FixtureEntity> {
    [
        ("Tom Hanks", "Tom_Hanks"),
        ("Dallas Cowboys", "Dallas_Cowboys"),
        ("Barack Obama", "Barack_Obama"),
        ("Marie Curie", "Marie_Curie"),
        ("Berlin", "Berlin"),
        ("France", "France"),
        ("Steven Spielberg", "Steven_Spielberg"),
        ("The Beatles", "The_Beatles"),
        ("Stanford University", "Stanford_University"),
        ("Nile", "Nile"),
    ]
    .iter()
    .map(|(name, resource)| FixtureEntity {
        name: name.to_string(),
        resource: resource.to_string(),
    })
    .collect()
}

const DBR: &str = "http://dbpedia.org/resource/";
const DBO: &str = "http://dbpedia.org/ontology/";

/// Question/query templates with one entity slot each, in the style of
/// hand-written question-answering datasets over DBpedia.
fn templates() -> Vec<(&'static str, String)> {
    let t = |q: &'static str, sparql: String| (q, sparql);
    vec![
        t(
            "who is the spouse of {e}",
            format!("SELECT DISTINCT ?uri WHERE {{ <{DBR}{{E}}> <{DBO}spouse> ?uri . }}"),
        ),
        t(
            "where was {e} born",
            format!("SELECT DISTINCT ?uri WHERE {{ <{DBR}{{E}}> <{DBO}birthPlace> ?uri . }}"),
        ),
        t(
            "how many players are in the team {e}",
            format!("SELECT DISTINCT COUNT(?uri) WHERE {{ ?uri <{DBO}team> <{DBR}{{E}}> . }}"),
        ),
        t(
            "is {e} married to an actor",
            format!(
                "ASK WHERE {{ <{DBR}{{E}}> <{DBO}spouse> ?x . ?x <{DBO}occupation> <{DBR}Actor> . }}"
            ),
        ),
        t(
            "list the movies directed by {e}",
            format!("SELECT DISTINCT ?uri WHERE {{ ?uri <{DBO}director> <{DBR}{{E}}> . }}"),
        ),
        t(
            "who founded {e}",
            format!("SELECT DISTINCT ?uri WHERE {{ <{DBR}{{E}}> <{DBO}foundedBy> ?uri . }}"),
        ),
        t(
            "what is the capital of {e}",
            format!("SELECT DISTINCT ?uri WHERE {{ <{DBR}{{E}}> <{DBO}capital> ?uri . }}"),
        ),
        t(
            "how many people live in {e}",
            format!("SELECT DISTINCT ?uri WHERE {{ <{DBR}{{E}}> <{DBO}populationTotal> ?uri . }}"),
        ),
        t(
            "which university did {e} attend",
            format!("SELECT DISTINCT ?uri WHERE {{ <{DBR}{{E}}> <{DBO}almaMater> ?uri . }}"),
        ),
        t(
            "name the first five works by {e}",
            format!(
                "SELECT DISTINCT ?uri WHERE {{ ?uri <{DBO}author> <{DBR}{{E}}> . }} ORDER BY ASC(?uri) LIMIT 5"
            ),
        ),
        t(
            "was {e} influenced by anyone",
            format!("ASK WHERE {{ <{DBR}{{E}}> <{DBO}influencedBy> ?x . }}"),
        ),
        t(
            "what does {e} belong to",
            format!(
                "SELECT DISTINCT ?uri WHERE {{ <{DBR}{{E}}> <{DBO}affiliation> ?uri . OPTIONAL {{ ?uri <{DBO}abbreviation> ?abbr . }} }}"
            ),
        ),
    ]
}

pub struct FixtureCorpus {
    /// Encoded queries for the denoising stage, shuffled.
    pub pretrain: Vec<EncodedQuery>,
    /// Question/encoded-query training pairs, shuffled the same way.
    pub pairs: Vec<ParallelExample>,
}

/// Instantiates the first `template_count` templates over the whole
/// entity pool. Every target is the codec-encoded query text.
pub fn make_fixture_corpus(
    template_count: usize,
    entity_pool: &[FixtureEntity],
    seed: u64,
) -> FixtureCorpus {
    assert!(!entity_pool.is_empty(), "entity pool must not be empty");
    let ns = NamespaceTable::with_defaults();
    let open = HostAllowlist::allow_all();
    let templates = templates();
    assert!(
        template_count > 0 && template_count <= templates.len(),
        "between 1 and {} templates are available",
        templates.len()
    );
    let mut pretrain = Vec::new();
    let mut pairs = Vec::new();
    for (question_tpl, query_tpl) in &templates[..template_count] {
        for entity in entity_pool {
            let question = question_tpl.replace("{e}", &entity.name.to_lowercase());
            let raw = query_tpl.replace("{E}", &entity.resource);
            let report = validate_query(&raw, &open);
            assert!(report.accepted, "fixture template produced an invalid query: {raw}");
            let encoded = encode(&raw, &ns).expect("fixture templates stay inside the codec");
            pairs.push(ParallelExample {
                source: question,
                target: encoded.text(),
                split: Split::Train,
                covered: false,
            });
            pretrain.push(encoded);
        }
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pairs = order.iter().map(|&i| pairs[i].clone()).collect();
    let pretrain = order.iter().map(|&i| pretrain[i].clone()).collect();
    FixtureCorpus { pretrain, pairs }
}

/// Everything a run needs, in one TOML document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Optional namespace-table TOML; the built-in DBpedia table otherwise.
    pub namespaces: Option<PathBuf>,
    pub tokenizer: TokenizerSettings,
    pub corruption: CorruptionConfig,
    pub model: ModelSettings,
    pub training: TrainingSettings,
    pub decoding: DecodingSettings,
    pub evaluation: EvalSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSettings {
    pub vocab_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_positions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSettings {
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodingSettings {
    pub beam_width: usize,
    pub max_len: usize,
    pub length_penalty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub smoothing: bool,
    pub normalize_em: bool,
}

impl Default for TokenizerSettings {
    fn default() -> Self {
        TokenizerSettings { vocab_size: 256 }
    }
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings { hidden: 64, layers: 2, heads: 2, ffn: 256, max_positions: 64 }
    }
}

impl Default for TrainingSettings {
    fn default() -> Self {
        TrainingSettings {
            lr: 1e-3,
            weight_decay: 0.0,
            clip_norm: Some(1.0),
            batch_size: 8,
            pretrain_epochs: 20,
            finetune_epochs: 60,
        }
    }
}

impl Default for DecodingSettings {
    fn default() -> Self {
        DecodingSettings { beam_width: 10, max_len: 48, length_penalty: 0.0 }
    }
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { smoothing: false, normalize_em: true }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 13,
            namespaces: None,
            tokenizer: TokenizerSettings::default(),
            corruption: CorruptionConfig::default(),
            model: ModelSettings::default(),
            training: TrainingSettings::default(),
            decoding: DecodingSettings::default(),
            evaluation: EvalSettings::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config does not parse: {0}")]
    Parse(String),
    #[error("inconsistent config: {0}")]
    Invalid(String),
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cross-field checks that individual setting structs cannot see.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        if self.tokenizer.vocab_size <= 5 {
            return bad("tokenizer.vocab_size must exceed the five special tokens".to_string());
        }
        if self.model.hidden == 0 || self.model.heads == 0 || self.model.hidden % self.model.heads != 0
        {
            return bad(format!(
                "model.hidden {} must be a positive multiple of model.heads {}",
                self.model.hidden, self.model.heads
            ));
        }
        if self.model.layers == 0 || self.model.ffn == 0 || self.model.max_positions == 0 {
            return bad("model dimensions must be nonzero".to_string());
        }
        if self.decoding.max_len > self.model.max_positions {
            return bad(format!(
                "decoding.max_len {} exceeds model.max_positions {}",
                self.decoding.max_len, self.model.max_positions
            ));
        }
        if self.decoding.beam_width == 0 {
            return bad("decoding.beam_width must be positive".to_string());
        }
        if self.training.batch_size == 0 {
            return bad("training.batch_size must be positive".to_string());
        }
        let c = &self.corruption;
        CorruptionConfig::new(c.mask_prob, c.mask_token_frac, c.random_frac, c.span, c.shuffle_rate)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }
}
