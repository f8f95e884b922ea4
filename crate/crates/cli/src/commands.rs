//! Subcommand implementations.
//!
//! Errors split into two lanes: `Usage` for anything the user can fix by
//! changing inputs or configuration (exit 2), `Runtime` for everything
//! else (exit 1).

use anyhow::Context;
use serde_json::json;
use sparqlgen::codec::{clean_query, dedupe_corpus, encode, CleanOutcome, HostAllowlist};
use sparqlgen::data::{load_parallel, make_fixture_corpus, CorpusFormat, RunConfig, Split};
use sparqlgen::decoding::{generate as beam_generate, BeamConfig};
use sparqlgen::evaluation::{evaluate_lines, EvalError};
use sparqlgen::model::{EncoderParams, ModelConfig};
use sparqlgen::tokenizer::{decode_sequence, encode_sequence, train_wordpiece, UNK_ID};
use sparqlgen::training::{
    finetune_seq2seq, init_decoder_from_encoder, pretrain_encoder, AdamHyper, Checkpoint,
    SeqPair, TrainOptions,
};
use sparqlgen::{EncodedQuery, NamespaceTable, RawQuery, TokenSequence, Vocab};
use std::path::Path;

pub enum AppError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for AppError {
    fn from(err: anyhow::Error) -> Self {
        AppError::Runtime(err)
    }
}

fn usage(msg: impl Into<String>) -> AppError {
    AppError::Usage(msg.into())
}

pub fn load_config(path: Option<&Path>, seed_override: Option<u64>) -> Result<RunConfig, AppError> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p).map_err(|e| usage(format!("{}: {e}", p.display())))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = seed_override {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn read_lines(path: &Path) -> Result<Vec<String>, AppError> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn write_lines(path: &Path, lines: &[String]) -> Result<(), AppError> {
    let mut out = String::new();
    for line in lines {
        out.push_str(line);
        out.push('\n');
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn load_namespaces(path: Option<&Path>) -> Result<NamespaceTable, AppError> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading {}", p.display()))?;
            NamespaceTable::from_toml(&text).map_err(|e| usage(format!("{}: {e}", p.display())))
        }
        None => Ok(NamespaceTable::with_defaults()),
    }
}

fn load_vocab(path: &Path) -> Result<Vocab, AppError> {
    Vocab::load(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn model_config(cfg: &RunConfig, vocab_len: usize) -> Result<ModelConfig, AppError> {
    ModelConfig::new(
        vocab_len,
        cfg.model.hidden,
        cfg.model.layers,
        cfg.model.heads,
        cfg.model.ffn,
        cfg.model.max_positions,
    )
    .map_err(|e| usage(e.to_string()))
}

fn load_encoder_checkpoint(
    path: &Path,
    expected: &ModelConfig,
) -> Result<EncoderParams<f32>, AppError> {
    let ckpt = Checkpoint::load(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    if ckpt.config != *expected {
        return Err(usage(format!(
            "{}: checkpoint was trained with {:?}, run is configured for {:?}",
            path.display(),
            ckpt.config,
            expected
        )));
    }
    ckpt.into_encoder().map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn train_options(cfg: &RunConfig, epochs: usize) -> TrainOptions {
    TrainOptions {
        hyper: AdamHyper {
            lr: cfg.training.lr,
            weight_decay: cfg.training.weight_decay,
            clip_norm: cfg.training.clip_norm,
            ..AdamHyper::with_lr(cfg.training.lr)
        },
        batch_size: cfg.training.batch_size,
        epochs,
        start_epoch: 0,
        seed: cfg.seed,
    }
}

pub fn make_fixtures(out_dir: &Path, templates: usize, cfg: &RunConfig) -> Result<(), AppError> {
    if templates == 0 {
        return Err(usage("--templates must be at least 1"));
    }
    let pool = sparqlgen::data::default_entity_pool();
    let ns = NamespaceTable::with_defaults();
    let corpus = make_fixture_corpus(templates, &pool, cfg.seed);
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let questions: Vec<String> = corpus.pairs.iter().map(|p| p.source.clone()).collect();
    let raw: Result<Vec<String>, _> =
        corpus.pretrain.iter().map(|q| sparqlgen::codec::decode(q, &ns)).collect();
    let raw = raw.map_err(|e| AppError::Runtime(anyhow::anyhow!("decoding fixture: {e}")))?;
    let encoded: Vec<String> = corpus.pretrain.iter().map(EncodedQuery::text).collect();
    write_lines(&out_dir.join("fixtures.en"), &questions)?;
    write_lines(&out_dir.join("fixtures.sparql"), &raw)?;
    write_lines(&out_dir.join("pretrain.txt"), &encoded)?;
    println!(
        "wrote {} pairs from {templates} templates to {}",
        corpus.pairs.len(),
        out_dir.display()
    );
    Ok(())
}

pub fn prepare_corpus(
    input: &Path,
    output: &Path,
    namespaces: Option<&Path>,
    allow_hosts: &[String],
    report: Option<&Path>,
) -> Result<(), AppError> {
    let ns = load_namespaces(namespaces)?;
    let allowlist = if allow_hosts.is_empty() {
        HostAllowlist::allow_all()
    } else {
        HostAllowlist::from_hosts(allow_hosts.iter().map(String::as_str))
    };
    let lines = read_lines(input)?;
    let mut accepted = Vec::new();
    let mut rejections: Vec<(usize, String)> = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw = RawQuery::with_source(line.clone(), format!("{}:{}", input.display(), i + 1));
        match clean_query(&raw, &ns, &allowlist) {
            CleanOutcome::Encoded(q) => accepted.push(q),
            CleanOutcome::Rejected(reason) => rejections.push((i + 1, reason)),
        }
    }
    let accepted_count = accepted.len();
    let deduped = dedupe_corpus(accepted);
    let duplicate_count = accepted_count - deduped.len();
    let encoded: Vec<String> = deduped.iter().map(EncodedQuery::text).collect();
    write_lines(output, &encoded)?;
    let summary = json!({
        "input_lines": lines.len(),
        "accepted": accepted_count,
        "rejected": rejections.len(),
        "duplicates_removed": duplicate_count,
        "written": encoded.len(),
        "rejections": rejections
            .iter()
            .take(50)
            .map(|(line, reason)| json!({"line": line, "reason": reason}))
            .collect::<Vec<_>>(),
    });
    if let Some(path) = report {
        std::fs::write(path, serde_json::to_string_pretty(&summary).unwrap())
            .with_context(|| format!("writing {}", path.display()))?;
    }
    println!(
        "kept {} of {} queries ({} rejected, {} duplicates)",
        encoded.len(),
        lines.len(),
        rejections.len(),
        duplicate_count
    );
    Ok(())
}

pub fn train_tokenizer(inputs: &[std::path::PathBuf], output: &Path, cfg: &RunConfig) -> Result<(), AppError> {
    let mut lines = Vec::new();
    for input in inputs {
        lines.extend(read_lines(input)?);
    }
    if lines.iter().all(|l| l.trim().is_empty()) {
        return Err(usage("tokenizer inputs contain no text"));
    }
    let vocab = train_wordpiece(&lines, cfg.tokenizer.vocab_size);
    vocab
        .save(output)
        .map_err(|e| AppError::Runtime(anyhow::anyhow!("writing {}: {e}", output.display())))?;
    println!("learned {} tokens into {}", vocab.len(), output.display());
    Ok(())
}

pub fn pretrain(corpus: &Path, vocab: &Path, output: &Path, cfg: &RunConfig) -> Result<(), AppError> {
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let vocab = load_vocab(vocab)?;
    let mut sequences: Vec<TokenSequence> = Vec::new();
    for (i, line) in read_lines(corpus)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let seq = encode_sequence(line, &vocab, cfg.model.max_positions);
        // an [UNK] here means the vocabulary was not trained on this
        // corpus; denoising would then learn to predict [UNK] itself
        if seq.ids.contains(&UNK_ID) {
            return Err(usage(format!(
                "{}: line {} tokenizes to [UNK]; train the tokenizer on this \
                 encoded corpus (or pass the vocabulary that was)",
                corpus.display(),
                i + 1
            )));
        }
        sequences.push(seq);
    }
    if sequences.is_empty() {
        return Err(usage(format!("{}: corpus is empty", corpus.display())));
    }
    let model_cfg = model_config(cfg, vocab.len())?;
    let examples = sparqlgen::corruption::make_pretrain_stream(
        &sequences,
        &cfg.corruption,
        vocab.len() as u32,
        cfg.seed,
    );
    let mut params = EncoderParams::<f32>::init(&model_cfg, cfg.seed);
    let opts = train_options(cfg, cfg.training.pretrain_epochs);
    let losses = pretrain_encoder(&mut params, &model_cfg, &examples, &opts);
    Checkpoint::from_encoder(model_cfg, &params)
        .save(output)
        .map_err(|e| AppError::Runtime(anyhow::anyhow!("writing {}: {e}", output.display())))?;
    println!(
        "pretrained {} steps on {} sequences, loss {:.4} -> {:.4}, saved {}",
        losses.len(),
        sequences.len(),
        losses.first().unwrap(),
        losses.last().unwrap(),
        output.display()
    );
    Ok(())
}

pub fn finetune(
    data: &Path,
    vocab: &Path,
    encoder: Option<&Path>,
    encoded_targets: bool,
    out_dir: &Path,
    cfg: &RunConfig,
) -> Result<(), AppError> {
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let vocab = load_vocab(vocab)?;
    let examples = load_parallel(data, CorpusFormat::PairedFiles, Split::Train)
        .map_err(|e| usage(format!("{}: {e}", data.display())))?;
    if examples.is_empty() {
        return Err(usage(format!("{}: no training pairs", data.display())));
    }
    let ns = load_namespaces(cfg.namespaces.as_deref())?;
    let mut pairs = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        let target_text = if encoded_targets {
            ex.target.clone()
        } else {
            encode(&ex.target, &ns)
                .map_err(|e| usage(format!("{}.sparql line {}: {e}", data.display(), i + 1)))?
                .text()
        };
        let target = encode_sequence(&target_text, &vocab, cfg.model.max_positions).ids;
        // a target the vocabulary cannot spell is unlearnable: the model
        // would train toward [UNK] and decode garbage, so refuse early.
        // [UNK] in questions is fine, unseen words are expected there.
        if target.contains(&UNK_ID) {
            return Err(usage(format!(
                "{}.sparql line {} tokenizes to [UNK]; train the tokenizer on \
                 encoded queries (pretrain.txt or prepare-corpus output), not \
                 raw SPARQL",
                data.display(),
                i + 1
            )));
        }
        pairs.push(SeqPair {
            source: encode_sequence(&ex.source, &vocab, cfg.model.max_positions).ids,
            target,
        });
    }
    let model_cfg = model_config(cfg, vocab.len())?;
    let mut enc = match encoder {
        Some(path) => load_encoder_checkpoint(path, &model_cfg)?,
        None => EncoderParams::<f32>::init(&model_cfg, cfg.seed),
    };
    let (mut dec, manifest) = init_decoder_from_encoder(&model_cfg, &enc, cfg.seed);
    println!(
        "decoder warm start: {} parameters copied, {} random, {} reset",
        manifest.copied_params, manifest.randomized_params, manifest.reset_params
    );
    let opts = train_options(cfg, cfg.training.finetune_epochs);
    let losses = finetune_seq2seq(&mut enc, &mut dec, &model_cfg, &pairs, &opts);
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let enc_path = out_dir.join("encoder.ckpt");
    let dec_path = out_dir.join("decoder.ckpt");
    Checkpoint::from_encoder(model_cfg, &enc)
        .save(&enc_path)
        .map_err(|e| AppError::Runtime(anyhow::anyhow!("writing {}: {e}", enc_path.display())))?;
    Checkpoint::from_decoder(model_cfg, &dec)
        .save(&dec_path)
        .map_err(|e| AppError::Runtime(anyhow::anyhow!("writing {}: {e}", dec_path.display())))?;
    println!(
        "finetuned {} steps on {} pairs, loss {:.4} -> {:.4}, saved {} and {}",
        losses.len(),
        pairs.len(),
        losses.first().unwrap(),
        losses.last().unwrap(),
        enc_path.display(),
        dec_path.display()
    );
    Ok(())
}

pub fn generate(
    encoder: &Path,
    decoder: &Path,
    vocab: &Path,
    input: &Path,
    output: &Path,
    cfg: &RunConfig,
) -> Result<(), AppError> {
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let vocab = load_vocab(vocab)?;
    let model_cfg = model_config(cfg, vocab.len())?;
    let enc = load_encoder_checkpoint(encoder, &model_cfg)?;
    let dec_ckpt =
        Checkpoint::load(decoder).map_err(|e| usage(format!("{}: {e}", decoder.display())))?;
    if dec_ckpt.config != model_cfg {
        return Err(usage(format!(
            "{}: decoder checkpoint does not match the configured model",
            decoder.display()
        )));
    }
    let dec = dec_ckpt.into_decoder().map_err(|e| usage(format!("{}: {e}", decoder.display())))?;
    let beam = BeamConfig {
        width: cfg.decoding.beam_width,
        max_len: cfg.decoding.max_len,
        length_penalty: cfg.decoding.length_penalty,
    };
    let questions = read_lines(input)?;
    let mut predictions = Vec::with_capacity(questions.len());
    for question in &questions {
        let source = encode_sequence(question, &vocab, model_cfg.max_positions);
        let ids = beam_generate(&enc, &dec, &model_cfg, &source.ids, &beam);
        predictions.push(decode_sequence(&ids, &vocab));
    }
    write_lines(output, &predictions)?;
    println!("translated {} questions into {}", predictions.len(), output.display());
    Ok(())
}

pub fn evaluate(
    candidates: &Path,
    references: &Path,
    report: Option<&Path>,
    cfg: &RunConfig,
) -> Result<(), AppError> {
    let cand = read_lines(candidates)?;
    let refs = read_lines(references)?;
    let result = evaluate_lines(&cand, &refs, cfg.evaluation.smoothing, cfg.evaluation.normalize_em)
        .map_err(|e| match e {
            EvalError::LengthMismatch { .. } | EvalError::EmptyCorpus => usage(e.to_string()),
        })?;
    let rendered = serde_json::to_string_pretty(&result).unwrap();
    println!("{rendered}");
    if let Some(path) = report {
        std::fs::write(path, &rendered)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}
