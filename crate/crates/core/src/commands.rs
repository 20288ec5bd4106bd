//! The `prepare`, `train`, `predict`, `evaluate` and `gradcheck` commands.
//! Each takes a [`RunConfig`] and writes human-readable lines to `out`.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, write_atomic};
use crate::config::RunConfig;
use crate::data::cache::{decode_featurized, decode_vocabularies, encode_featurized, encode_vocabularies, CorpusRecord};
use crate::data::{
    extend_vocabularies, featurize, load_embeddings, parse_contextual, parse_dataset, parse_gold, random_embeddings,
    ContextualVectors, DefaultTagger, LexiconTagger, ParsedDataset, TagProvider, Vocabularies,
};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, parse_na_probs, parse_predictions, EvalReport};
use crate::gradcheck::{self, GradcheckReport};
use crate::inference::{answer_map, na_prob_map, predict};
use crate::model::{ModelConfig, SanModel};
use crate::rng::seeded;
use crate::train::{Corpus, EpochMetrics, Trainer};

/// Bumped whenever tokenization or featurization changes.
const CACHE_VERSION: &str = "joint-san-cache-1";

fn io_out(e: std::io::Error) -> Error {
    Error::io("standard output", e)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingInput(path.to_path_buf()))
    }
}

fn required<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    value.as_deref().ok_or_else(|| Error::Config(format!("{key} is not set")))
}

fn tagger(cfg: &RunConfig) -> Result<Box<dyn TagProvider>> {
    match &cfg.tag_file {
        Some(path) => Ok(Box::new(LexiconTagger::parse(&read_text(path)?)?)),
        None => Ok(Box::new(DefaultTagger)),
    }
}

/// Corpus statistics printed by `prepare`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub examples: usize,
    pub unanswerable: usize,
    pub unanswerable_fraction: f64,
    pub skipped_alignments: usize,
    pub skipped_empty: usize,
}

impl SplitStats {
    fn of(parsed: &ParsedDataset) -> Self {
        SplitStats {
            examples: parsed.examples.len(),
            unanswerable: parsed.examples.iter().filter(|e| e.is_unanswerable).count(),
            unanswerable_fraction: parsed.unanswerable_fraction(),
            skipped_alignments: parsed.skipped_alignments,
            skipped_empty: parsed.skipped_empty,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheStats {
    pub train: SplitStats,
    pub dev: Option<SplitStats>,
    pub word_vocab: usize,
    pub pos_vocab: usize,
    pub ner_vocab: usize,
}

pub struct Prepared {
    pub vocabularies: Vocabularies,
    pub train: Corpus,
    pub dev: Option<Corpus>,
    pub stats: CacheStats,
    pub cache_path: PathBuf,
    pub cache_hit: bool,
}

/// Cache key: a digest of every input that affects featurization.
fn cache_key(cfg: &RunConfig) -> Result<String> {
    let mut h = Sha256::new();
    h.update(CACHE_VERSION.as_bytes());
    for (label, path) in [
        ("train", cfg.train_file.as_deref()),
        ("dev", cfg.dev_file.as_deref()),
        ("tags", cfg.tag_file.as_deref()),
    ] {
        h.update(label.as_bytes());
        match path {
            Some(p) => {
                let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
                h.update((bytes.len() as u64).to_le_bytes());
                h.update(&bytes);
            }
            None => h.update(b"none"),
        }
    }
    Ok(hex::encode(h.finalize()))
}

fn records_to_corpus(records: Vec<CorpusRecord>) -> Corpus {
    let (examples, features) = records.into_iter().map(|r| (r.example, r.features)).unzip();
    Corpus::new(examples, features)
}

fn load_cache(dir: &Path) -> Result<Prepared> {
    let read = |name: &str| read_text(&dir.join(name));
    let vocabularies = decode_vocabularies(&read("vocab.json")?)?;
    let stats: CacheStats = serde_json::from_str(&read("stats.json")?).map_err(|e| Error::parse("cache stats", e))?;
    let train = records_to_corpus(decode_featurized(&read("train.jsonl")?)?);
    let dev_path = dir.join("dev.jsonl");
    let dev = if dev_path.exists() {
        Some(records_to_corpus(decode_featurized(&read_text(&dev_path)?)?))
    } else {
        None
    };
    Ok(Prepared {
        vocabularies,
        train,
        dev,
        stats,
        cache_path: dir.to_path_buf(),
        cache_hit: true,
    })
}

/// Tokenizes, tags and featurizes train and dev into the cache, or reads
/// them back when the inputs are unchanged. The cache directory appears
/// only once complete.
pub fn prepare(cfg: &RunConfig, out: &mut dyn Write) -> Result<Prepared> {
    let train_path = required(&cfg.train_file, "train_file")?;
    require_file(train_path)?;
    for p in [&cfg.dev_file, &cfg.tag_file, &cfg.embeddings, &cfg.contextual_file].into_iter().flatten() {
        require_file(p)?;
    }
    let key = cache_key(cfg)?;
    let dir = cfg.cache_dir.join(&key);
    let prepared = if dir.is_dir() {
        load_cache(&dir)?
    } else {
        let tagger = tagger(cfg)?;
        let train = parse_dataset(&read_text(train_path)?)?;
        let dev = match &cfg.dev_file {
            Some(p) => Some(parse_dataset(&read_text(p)?)?),
            None => None,
        };
        let mut vocabularies = Vocabularies::default();
        extend_vocabularies(&mut vocabularies, &train.examples, tagger.as_ref());
        if let Some(d) = &dev {
            extend_vocabularies(&mut vocabularies, &d.examples, tagger.as_ref());
        }
        let records = |parsed: &ParsedDataset| -> Vec<CorpusRecord> {
            parsed
                .examples
                .iter()
                .map(|e| CorpusRecord {
                    example: e.clone(),
                    features: featurize(e, &vocabularies, tagger.as_ref()),
                })
                .collect()
        };
        let train_records = records(&train);
        let dev_records = dev.as_ref().map(records);
        let stats = CacheStats {
            train: SplitStats::of(&train),
            dev: dev.as_ref().map(SplitStats::of),
            word_vocab: vocabularies.words.len(),
            pos_vocab: vocabularies.pos.len(),
            ner_vocab: vocabularies.ner.len(),
        };
        std::fs::create_dir_all(&cfg.cache_dir).map_err(|e| Error::io(&cfg.cache_dir, e))?;
        let tmp = cfg.cache_dir.join(format!(".{key}.{}.tmp", std::process::id()));
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let write = |name: &str, text: &str| -> Result<()> {
            let p = tmp.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        write("vocab.json", &encode_vocabularies(&vocabularies))?;
        write("train.jsonl", &encode_featurized(&train_records))?;
        if let Some(r) = &dev_records {
            write("dev.jsonl", &encode_featurized(r))?;
        }
        write("stats.json", &serde_json::to_string_pretty(&stats).expect("stats serialize"))?;
        if let Err(e) = std::fs::rename(&tmp, &dir) {
            // Another process finished the same cache first.
            let _ = std::fs::remove_dir_all(&tmp);
            if !dir.is_dir() {
                return Err(Error::io(&dir, e));
            }
        }
        Prepared {
            vocabularies,
            train: records_to_corpus(train_records),
            dev: dev_records.map(records_to_corpus),
            stats,
            cache_path: dir.clone(),
            cache_hit: false,
        }
    };
    print_stats(&prepared, out).map_err(io_out)?;
    Ok(prepared)
}

fn print_stats(p: &Prepared, out: &mut dyn Write) -> std::io::Result<()> {
    let s = &p.stats;
    writeln!(
        out,
        "cache {} ({})",
        p.cache_path.display(),
        if p.cache_hit { "hit" } else { "built" }
    )?;
    let mut split = |name: &str, st: &SplitStats| {
        writeln!(
            out,
            "{name}: {} examples, {} unanswerable ({:.2}%), {} skipped alignments, {} empty questions",
            st.examples,
            st.unanswerable,
            100.0 * st.unanswerable_fraction,
            st.skipped_alignments,
            st.skipped_empty
        )
    };
    split("train", &s.train)?;
    if let Some(d) = &s.dev {
        split("dev", d)?;
    }
    writeln!(out, "vocabulary: {} words, {} pos tags, {} entity tags", s.word_vocab, s.pos_vocab, s.ner_vocab)
}

/// Splits contextual vectors between corpora; every example must have some.
fn attach_contextual(corpora: &mut [&mut Corpus], vectors: HashMap<String, ContextualVectors>) -> Result<()> {
    for corpus in corpora.iter_mut() {
        let mut missing = Vec::new();
        for e in &corpus.examples {
            match vectors.get(&e.id) {
                Some(v) => {
                    corpus.contextual.insert(e.id.clone(), v.clone());
                }
                None => missing.push(e.id.clone()),
            }
        }
        if let Some(first) = missing.first() {
            return Err(Error::Config(format!(
                "contextual vectors missing for {} examples (first: {first})",
                missing.len()
            )));
        }
    }
    Ok(())
}

fn load_contextual(cfg: &RunConfig) -> Result<Option<HashMap<String, ContextualVectors>>> {
    match (&cfg.contextual_file, cfg.contextual_dim) {
        (Some(path), Some(dim)) => Ok(Some(parse_contextual(&read_text(path)?, dim)?)),
        _ => Ok(None),
    }
}

pub struct TrainOutcome {
    pub trainer: Trainer,
    pub vocabularies: Vocabularies,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub metrics_file: PathBuf,
}

fn metrics_jsonl(history: &[EpochMetrics]) -> String {
    history
        .iter()
        .map(|m| serde_json::to_string(m).expect("metrics serialize") + "\n")
        .collect()
}

fn fmt_dev(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.2}"))
}

/// Trains from scratch, or continues from `last.ckpt` when `resume` is set
/// and a checkpoint exists. Writes `last.ckpt` after every epoch and
/// `best.ckpt` whenever dev F1 improves (every epoch when there is no dev
/// set), and keeps the metrics log in step with the checkpoint.
pub fn train(cfg: &RunConfig, out: &mut dyn Write) -> Result<TrainOutcome> {
    let mut prepared = prepare(cfg, out)?;
    if let Some(vectors) = load_contextual(cfg)? {
        let mut corpora: Vec<&mut Corpus> = vec![&mut prepared.train];
        if let Some(d) = prepared.dev.as_mut() {
            corpora.push(d);
        }
        attach_contextual(&mut corpora, vectors)?;
    }
    let last = cfg.checkpoint_dir.join("last.ckpt");
    let best = cfg.checkpoint_dir.join("best.ckpt");
    let metrics_file = cfg.metrics_path();
    let mut trainer = if cfg.resume && last.is_file() {
        let ckpt = checkpoint::load(&last)?;
        if ckpt.meta.vocabularies != prepared.vocabularies {
            return Err(Error::Incompatible(format!(
                "{} was trained on different data or vocabularies",
                last.display()
            )));
        }
        check_dimensions(cfg, &ckpt.meta.model_config)?;
        writeln!(out, "resuming from {} after epoch {}", last.display(), ckpt.meta.epoch).map_err(io_out)?;
        let mut trainer = ckpt.into_trainer()?;
        // Only the schedule length may change on resume.
        trainer.config.epochs = cfg.train.epochs;
        trainer
    } else {
        let mut rng = seeded(cfg.train.seed);
        let words = &prepared.vocabularies.words;
        let table = match &cfg.embeddings {
            Some(path) => {
                let t = load_embeddings(path, words, cfg.embedding_dim, &mut rng)?;
                writeln!(out, "embeddings: {} of {} words matched", t.matched, words.len()).map_err(io_out)?;
                t.table
            }
            None => random_embeddings(words, cfg.embedding_dim, &mut rng),
        };
        let model_config = cfg.train.model_config(&prepared.vocabularies, cfg.embedding_dim, cfg.contextual_dim);
        let model = SanModel::new(model_config, table, &mut rng)?;
        Trainer::new(cfg.train.clone(), model, rng)
    };
    writeln!(
        out,
        "variant {}, {} trainable parameters",
        trainer.config.variant.name(),
        trainable_scalars(&trainer.model)
    )
    .map_err(io_out)?;
    writeln!(
        out,
        "{:>5} {:>8} {:>8} {:>8} {:>8} | {:>6} {:>6} {:>6}",
        "epoch", "lr", "joint", "span", "cls", "EM", "F1", "acc"
    )
    .map_err(io_out)?;
    while trainer.epoch < trainer.config.epochs {
        let (m, improved) = trainer.run_epoch(&prepared.train, prepared.dev.as_ref())?;
        writeln!(
            out,
            "{:>5} {:>8.5} {:>8.4} {:>8.4} {:>8.4} | {:>6} {:>6} {:>6}{}",
            m.epoch,
            m.lr,
            m.joint_loss,
            m.span_loss,
            m.classifier_loss,
            fmt_dev(m.dev.as_ref().map(|d| d.em)),
            fmt_dev(m.dev.as_ref().map(|d| d.f1)),
            fmt_dev(m.dev.as_ref().map(|d| d.classifier_accuracy)),
            if improved { " *" } else { "" }
        )
        .map_err(io_out)?;
        let bytes = checkpoint::encode_checkpoint(&trainer, &prepared.vocabularies);
        write_atomic(&last, &bytes)?;
        if improved || m.dev.is_none() {
            write_atomic(&best, &bytes)?;
        }
        write_atomic(&metrics_file, metrics_jsonl(&trainer.history).as_bytes())?;
    }
    if !best.exists() && last.exists() {
        std::fs::copy(&last, &best).map_err(|e| Error::io(&best, e))?;
    }
    Ok(TrainOutcome {
        trainer,
        vocabularies: prepared.vocabularies,
        last_checkpoint: last,
        best_checkpoint: best,
        metrics_file,
    })
}

fn trainable_scalars(model: &SanModel) -> usize {
    model.params.entries().iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
}

/// The configured sizes must match the checkpoint's.
fn check_dimensions(cfg: &RunConfig, stored: &ModelConfig) -> Result<()> {
    let pairs = [
        ("hidden_size", cfg.train.hidden_size, stored.hidden_size),
        ("embedding_dim", cfg.embedding_dim, stored.embedding_dim),
        ("pos_dim", cfg.train.pos_dim, stored.pos_dim),
        ("ner_dim", cfg.train.ner_dim, stored.ner_dim),
        ("steps", cfg.train.steps, stored.steps),
    ];
    for (name, want, have) in pairs {
        if want != have {
            return Err(Error::Incompatible(format!("{name} is {want} in the configuration but {have} in the checkpoint")));
        }
    }
    if cfg.contextual_dim != stored.contextual_dim {
        return Err(Error::Incompatible(format!(
            "contextual_dim is {:?} in the configuration but {:?} in the checkpoint",
            cfg.contextual_dim, stored.contextual_dim
        )));
    }
    Ok(())
}

pub struct PredictOutcome {
    pub answers: BTreeMap<String, String>,
    pub na_probs: BTreeMap<String, f64>,
}

/// Answers every question of `predict_file` (default: the dev file) with
/// the checkpoint, honoring the configured variant and threshold.
pub fn predict_cmd(cfg: &RunConfig, out: &mut dyn Write) -> Result<PredictOutcome> {
    let input = cfg
        .predict_file
        .as_deref()
        .or(cfg.dev_file.as_deref())
        .ok_or_else(|| Error::Config("predict_file is not set".into()))?;
    let ckpt_path = cfg.checkpoint_path();
    require_file(input)?;
    require_file(&ckpt_path)?;
    for p in [&cfg.tag_file, &cfg.contextual_file].into_iter().flatten() {
        require_file(p)?;
    }
    let ckpt = checkpoint::load(&ckpt_path)?;
    check_dimensions(cfg, &ckpt.meta.model_config)?;
    let tagger = tagger(cfg)?;
    let parsed = parse_dataset(&read_text(input)?)?;
    let features = parsed
        .examples
        .iter()
        .map(|e| featurize(e, &ckpt.meta.vocabularies, tagger.as_ref()))
        .collect();
    let mut corpus = Corpus::new(parsed.examples, features);
    if let Some(vectors) = load_contextual(cfg)? {
        attach_contextual(&mut [&mut corpus], vectors)?;
    }
    let preds = predict(&ckpt.model, &corpus.items(), cfg.train.variant, cfg.train.threshold, cfg.workers)?;
    let answers = answer_map(&preds);
    let na_probs = na_prob_map(&preds);
    let json = serde_json::to_string_pretty(&answers).expect("predictions serialize") + "\n";
    write_atomic(&cfg.predictions_file, json.as_bytes())?;
    if let Some(p) = &cfg.na_probs_file {
        let json = serde_json::to_string_pretty(&na_probs).expect("probabilities serialize") + "\n";
        write_atomic(p, json.as_bytes())?;
    }
    let empty = answers.values().filter(|a| a.is_empty()).count();
    writeln!(
        out,
        "{} predictions ({} empty) from {} with variant {} written to {}",
        answers.len(),
        empty,
        ckpt_path.display(),
        cfg.train.variant.name(),
        cfg.predictions_file.display()
    )
    .map_err(io_out)?;
    if parsed.skipped_alignments + parsed.skipped_empty > 0 {
        writeln!(
            out,
            "skipped {} questions that could not be featurized",
            parsed.skipped_alignments + parsed.skipped_empty
        )
        .map_err(io_out)?;
    }
    Ok(PredictOutcome { answers, na_probs })
}

/// Scores `predictions_file` (and `na_probs_file`, when set) against the
/// gold answers of `predict_file` (default: the dev file).
pub fn evaluate_cmd(cfg: &RunConfig, out: &mut dyn Write) -> Result<EvalReport> {
    let gold_path = cfg
        .predict_file
        .as_deref()
        .or(cfg.dev_file.as_deref())
        .ok_or_else(|| Error::Config("dev_file is not set".into()))?;
    require_file(gold_path)?;
    require_file(&cfg.predictions_file)?;
    let gold = parse_gold(&read_text(gold_path)?)?;
    let predictions = parse_predictions(&read_text(&cfg.predictions_file)?)?;
    let na_probs = match &cfg.na_probs_file {
        Some(p) => Some(parse_na_probs(&read_text(p)?)?),
        None => None,
    };
    let report = evaluate(&gold, &predictions, na_probs.as_ref(), cfg.train.threshold);
    print_report(&report, out).map_err(io_out)?;
    Ok(report)
}

fn print_report(r: &EvalReport, out: &mut dyn Write) -> std::io::Result<()> {
    writeln!(out, "exact match {:.4}  F1 {:.4}  over {} questions", r.em, r.f1, r.total)?;
    writeln!(
        out,
        "answerable: {} questions, EM {:.4}, F1 {:.4}",
        r.has_answer.total, r.has_answer.em, r.has_answer.f1
    )?;
    writeln!(
        out,
        "unanswerable: {} questions, EM {:.4}, F1 {:.4}",
        r.no_answer.total, r.no_answer.em, r.no_answer.f1
    )?;
    if let Some(acc) = r.classifier_accuracy {
        writeln!(out, "classifier accuracy {acc:.4}")?;
    }
    if r.missing > 0 {
        writeln!(out, "warning: {} questions have no prediction and score 0", r.missing)?;
    }
    if !r.unknown_ids.is_empty() {
        writeln!(out, "warning: ignored {} predictions with unknown ids", r.unknown_ids.len())?;
    }
    Ok(())
}

/// Finite-difference check of every op rule and every parameter group of
/// the toy model. Fails with the worst offender named.
pub fn gradcheck_cmd(cfg: &RunConfig, out: &mut dyn Write) -> Result<GradcheckReport> {
    let fault = cfg.gradcheck_fault.as_deref().map(gradcheck::parse_fault).transpose()?;
    let report = gradcheck::run(cfg.train.seed, fault)?;
    let status = |ok: bool| if ok { "ok" } else { "FAIL" };
    for c in report.ops.iter().filter(|c| !c.passed) {
        writeln!(out, "{:<44} rel {:.3e} {}", c.name, c.rel_error, status(c.passed)).map_err(io_out)?;
    }
    writeln!(out, "{} op rules checked", report.ops.len()).map_err(io_out)?;
    for c in &report.groups {
        writeln!(
            out,
            "{:<44} {:>5} values  rel {:.3e} {}",
            c.name,
            c.scalars,
            c.rel_error,
            status(c.passed)
        )
        .map_err(io_out)?;
    }
    writeln!(
        out,
        "toy seed {}, {} parameter groups, worst {:.3e}, {:.1}s",
        report.toy_seed,
        report.groups.len(),
        report.worst_group_error(),
        report.seconds
    )
    .map_err(io_out)?;
    // A broken op rule is the root cause of any group failure it produces.
    let worst_of = |checks: &[gradcheck::CheckResult]| {
        checks
            .iter()
            .filter(|c| !c.passed)
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
            .cloned()
    };
    let worst = worst_of(&report.ops).or_else(|| worst_of(&report.groups));
    if let Some(w) = worst {
        return Err(Error::CheckFailed(format!(
            "gradient check failed; worst is {} with relative error {:.3e}",
            w.name, w.rel_error
        )));
    }
    writeln!(out, "gradient check passed").map_err(io_out)?;
    Ok(report)
}
