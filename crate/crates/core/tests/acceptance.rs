//! Acceptance criteria for the joint reading-comprehension model. Each test
//! prints one `PASS`/`FAIL` line naming its criterion.
//!
//! Tests take a shared lock so that timed criteria run alone on the core.

#![allow(clippy::needless_range_loop)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use rand::Rng;
use serde::Deserialize;

use joint_san::answer::decode_span;
use joint_san::classifier::override_answer;
use joint_san::commands::{self, Prepared};
use joint_san::config::RunConfig;
use joint_san::data::{parse_dataset, parse_gold, FeaturizedExample};
use joint_san::evaluation::{evaluate, parse_predictions};
use joint_san::gradcheck;
use joint_san::inference::predict;
use joint_san::model::{Mode, ModelConfig, SanModel, Variant};
use joint_san::optim::learning_rate;
use joint_san::params::Bound;
use joint_san::rng::seeded;
use joint_san::tensor::{Graph, OpKind, Tensor, Var};
use joint_san::train::{corpus_loss, evaluate_corpus, Corpus, EpochMetrics, TrainConfig, Trainer};

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(rel)
}

/// Prints the criterion's verdict, then fails the test if any check failed.
/// The line goes straight to the process's stdout so that it shows up even
/// when the harness captures test output.
fn report(criterion: &str, failures: &[String], detail: &str) {
    use std::io::Write;
    let line = if failures.is_empty() {
        format!("PASS {criterion}: {detail}\n")
    } else {
        format!("FAIL {criterion}: {}\n", failures.join("; "))
    };
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes()).and_then(|_| out.flush());
    assert!(failures.is_empty(), "{criterion} failed: {}", failures.join("; "));
}

fn check(failures: &mut Vec<String>, ok: bool, what: impl Into<String>) {
    if !ok {
        failures.push(what.into());
    }
}

fn config(file: &Path, overrides: &[(&str, String)]) -> RunConfig {
    let args: Vec<String> = overrides.iter().flat_map(|(k, v)| [format!("--{k}"), v.clone()]).collect();
    RunConfig::load(Some(file), &args).expect("config loads")
}

#[test]
fn gradient_fidelity() {
    let _guard = serial();
    let mut failures = Vec::new();
    let cfg = RunConfig::default();
    let start = Instant::now();
    let result = commands::gradcheck_cmd(&cfg, &mut Vec::new());
    let seconds = start.elapsed().as_secs_f64();
    let report_ = match result {
        Ok(r) => r,
        Err(e) => {
            report("gradient fidelity", &[e.to_string()], "");
            unreachable!()
        }
    };
    for c in &report_.groups {
        check(&mut failures, c.rel_error < 1e-4, format!("{} rel error {:.3e}", c.name, c.rel_error));
    }
    let (toy, _) = gradcheck::toy(report_.toy_seed).unwrap();
    let f = &toy.features[0];
    check(
        &mut failures,
        (toy.model.config.hidden_size, f.question_len, f.passage_len - 1, toy.model.config.steps) == (4, 3, 4, 3),
        "toy sizes are not d=4, m=3, n=4, T=3",
    );
    let expected: Vec<&str> = toy.model.params.entries().iter().filter(|e| e.trainable).map(|e| e.name.as_str()).collect();
    let checked: Vec<&str> = report_.groups.iter().map(|c| c.name.as_str()).collect();
    check(&mut failures, expected == checked, "not every parameter group was checked");
    check(&mut failures, seconds < 60.0, format!("took {seconds:.1}s"));

    let faulty = gradcheck::check_ops(Some(OpKind::Softmax)).unwrap();
    let named: Vec<&str> = faulty.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    check(&mut failures, named == ["op softmax input 0"], format!("corrupted softmax rule reported as {named:?}"));
    report(
        "gradient fidelity",
        &failures,
        &format!(
            "{} groups, worst relative error {:.2e}, {seconds:.1}s",
            report_.groups.len(),
            report_.worst_group_error()
        ),
    );
}

struct OverfitRun {
    prepared: Prepared,
    trainer: Trainer,
    seconds: f64,
    _dir: tempfile::TempDir,
}

/// Trains the committed overfit recipe once; two criteria inspect it.
fn overfit_run() -> &'static OverfitRun {
    static RUN: OnceLock<OverfitRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(
            &repo_root().join("configs/overfit.cfg"),
            &[
                ("cache_dir", dir.path().join("cache").display().to_string()),
                ("checkpoint_dir", dir.path().join("ckpt").display().to_string()),
            ],
        );
        let start = Instant::now();
        let outcome = commands::train(&cfg, &mut Vec::new()).expect("training runs");
        let seconds = start.elapsed().as_secs_f64();
        let prepared = commands::prepare(&cfg, &mut Vec::new()).unwrap();
        assert!(prepared.cache_hit);
        OverfitRun {
            prepared,
            trainer: outcome.trainer,
            seconds,
            _dir: dir,
        }
    })
}

#[test]
fn overfit_synthetic_corpus() {
    let _guard = serial();
    let run = overfit_run();
    let mut failures = Vec::new();
    let train = &run.prepared.train;
    let cfg = &run.trainer.config;
    let unanswerable = train.examples.iter().filter(|e| e.is_unanswerable).count();
    check(&mut failures, train.len() == 32 && unanswerable == 16, "corpus is not 32 examples, half unanswerable");
    check(
        &mut failures,
        cfg.hidden_size == 32 && cfg.steps == 3 && cfg.epochs <= 300,
        "recipe is not d=32, T=3, at most 300 epochs",
    );
    let metrics = evaluate_corpus(&run.trainer.model, train, Variant::JointClassifier, cfg.threshold, 1).unwrap();
    let (joint, _, _) = corpus_loss(&run.trainer.model, train, cfg.effective_lambda()).unwrap();
    check(&mut failures, metrics.em >= 95.0, format!("train EM {:.2}", metrics.em));
    check(&mut failures, joint < 0.1, format!("joint loss {joint:.4}"));
    check(
        &mut failures,
        metrics.classifier_accuracy == 100.0,
        format!("classifier accuracy {:.2}", metrics.classifier_accuracy),
    );
    check(&mut failures, run.seconds < 300.0, format!("took {:.1}s", run.seconds));
    report(
        "overfit",
        &failures,
        &format!(
            "{} epochs, train EM {:.2}, joint loss {joint:.4}, classifier accuracy {:.2}, {:.1}s",
            run.trainer.epoch, metrics.em, metrics.classifier_accuracy, run.seconds
        ),
    );
}

#[test]
fn variant_ordering() {
    let _guard = serial();
    let run = overfit_run();
    let mut failures = Vec::new();
    let dev = run.prepared.dev.as_ref().expect("dev split");
    let model = &run.trainer.model;
    let thr = run.trainer.config.threshold;
    let with_classifier = evaluate_corpus(model, dev, Variant::JointClassifier, thr, 1).unwrap();
    let joint = evaluate_corpus(model, dev, Variant::Joint, thr, 1).unwrap();
    check(
        &mut failures,
        with_classifier.f1 >= joint.f1 - 0.5,
        format!("joint+classifier F1 {:.2} < joint F1 {:.2} - 0.5", with_classifier.f1, joint.f1),
    );
    let history = &run.trainer.history;
    let finite = history
        .iter()
        .all(|m| m.span_loss.is_finite() && m.classifier_loss.is_finite() && m.joint_loss.is_finite());
    check(&mut failures, finite, "a loss became non-finite");
    let (first, last) = (&history[0], history.last().unwrap());
    check(
        &mut failures,
        last.span_loss < 0.1 * first.span_loss,
        format!("span loss {:.4} -> {:.4}", first.span_loss, last.span_loss),
    );
    check(
        &mut failures,
        last.classifier_loss < 0.1 * first.classifier_loss,
        format!("classifier loss {:.4} -> {:.4}", first.classifier_loss, last.classifier_loss),
    );
    report(
        "variant ordering",
        &failures,
        &format!(
            "dev F1 joint+classifier {:.2}, joint {:.2}; span loss {:.3} -> {:.4}, classifier loss {:.3} -> {:.4}",
            with_classifier.f1, joint.f1, first.span_loss, last.span_loss, first.classifier_loss, last.classifier_loss
        ),
    );
}

/// Checks that the first `len` entries of every row in `rows` sum to one
/// and the rest are exactly zero; rows at or beyond `live_rows` must be all
/// zero.
fn check_rows(g: &Graph, v: Var, live_rows: usize, len: usize, what: &str, worst: &mut f64, failures: &mut Vec<String>) {
    let t = g.value(v);
    for r in 0..t.rows() {
        let row = t.row(r);
        if r >= live_rows {
            if row.iter().any(|x| *x != 0.0) {
                failures.push(format!("{what}: padding row {r} has mass"));
            }
            continue;
        }
        let mass: f64 = row[..len].iter().sum();
        *worst = worst.max((mass - 1.0).abs());
        if (mass - 1.0).abs() > 1e-6 {
            failures.push(format!("{what}: row {r} sums to {mass}"));
        }
        if row[len..].iter().any(|x| *x != 0.0) {
            failures.push(format!("{what}: row {r} puts mass on padding"));
        }
    }
}

fn random_features(rng: &mut impl Rng, cfg: &ModelConfig, id: usize) -> FeaturizedExample {
    let m = rng.gen_range(1..=5);
    let n = rng.gen_range(2..=9);
    let (pad_m, pad_n) = (m + rng.gen_range(0..3), n + rng.gen_range(0..3));
    let word = |rng: &mut dyn rand::RngCore| rng.gen_range(3..cfg.word_vocab_size);
    let mut passage_ids: Vec<usize> = (0..n - 1).map(|_| word(rng)).collect();
    passage_ids.push(2);
    let unanswerable = rng.gen_bool(0.5);
    let begin = rng.gen_range(0..n - 1);
    let fe = FeaturizedExample {
        id: format!("r{id}"),
        question_ids: (0..m).map(|_| word(rng)).collect(),
        passage_ids,
        pos_ids: (0..n).map(|_| rng.gen_range(0..cfg.pos_vocab_size)).collect(),
        ner_ids: (0..n).map(|_| rng.gen_range(0..cfg.ner_vocab_size)).collect(),
        match_features: (0..n).map(|_| [rng.gen_range(0..2) as f64, 0.0, 1.0, rng.gen()]).collect(),
        question_len: m,
        passage_len: n,
        span: if unanswerable { (n - 1, n - 1) } else { (begin, begin) },
        is_unanswerable: unanswerable,
    };
    fe.padded(pad_m, pad_n)
}

#[test]
fn distribution_invariants() {
    let _guard = serial();
    let mut failures = Vec::new();
    let mut rng = seeded(2024);
    let mut worst = 0.0f64;
    let (mut passes, mut diagonal_checked) = (0, 0usize);
    for model_seed in 0..40u64 {
        let cfg = ModelConfig {
            word_vocab_size: 12,
            embedding_dim: 3,
            pos_vocab_size: 4,
            ner_vocab_size: 3,
            pos_dim: 2,
            ner_dim: 2,
            hidden_size: 1 + (model_seed as usize % 4),
            contextual_dim: None,
            steps: 1 + (model_seed as usize % 5),
            max_span_len: 15,
            tune_embeddings: model_seed % 2 == 0,
        };
        let mut init = seeded(model_seed);
        let table = Tensor::new(
            vec![12, 3],
            (0..36).map(|_| init.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let model = SanModel::new(cfg.clone(), table, &mut init).unwrap();
        for k in 0..25 {
            let fe = random_features(&mut rng, &cfg, k);
            let (m, n) = (fe.question_len, fe.passage_len);
            let mut g = Graph::new();
            let binding = model.params.bind(&mut g);
            let p = Bound::new(&model.params, &binding);
            let mut stream = seeded(rng.gen());
            let mut mode = if k % 2 == 0 {
                Mode::train(0.3, 0.5, &mut stream)
            } else {
                Mode::eval()
            };
            let f = model.forward(&mut g, p, &fe, None, &mut mode).unwrap();
            let tr = &f.trace;
            let fail = &mut failures;
            check_rows(&g, tr.align_attention, n, m, "alignment", &mut worst, fail);
            let c_t = g.value(tr.question_attention).transpose();
            let mut h = Graph::new();
            let c_t = h.constant(c_t);
            check_rows(&h, c_t, n, m, "C column", &mut worst, fail);
            let s = g.value(tr.self_attention);
            for i in 0..s.rows() {
                if s.get(i, i) != 0.0 {
                    fail.push(format!("self-attention diagonal {i} is {}", s.get(i, i)));
                }
                diagonal_checked += 1;
            }
            // Each live row sums to one over the other live columns.
            check_rows(&g, tr.self_attention, n, n, "self-attention", &mut worst, fail);
            check_rows(&g, tr.alpha, 1, m, "alpha", &mut worst, fail);
            for (t, b) in tr.betas.iter().enumerate() {
                check_rows(&g, *b, 1, n, &format!("beta step {t}"), &mut worst, fail);
            }
            for (t, (b, e)) in tr.step_begin.iter().zip(&tr.step_end).enumerate() {
                check_rows(&g, *b, 1, n, &format!("P_begin step {t}"), &mut worst, fail);
                check_rows(&g, *e, 1, n, &format!("P_end step {t}"), &mut worst, fail);
            }
            check_rows(&g, f.p_begin, 1, n, "averaged P_begin", &mut worst, fail);
            check_rows(&g, f.p_end, 1, n, "averaged P_end", &mut worst, fail);
            check_rows(&g, tr.gamma, 1, n, "gamma", &mut worst, fail);
            passes += 1;
        }
    }
    failures.truncate(10);
    check(&mut failures, passes == 1000, format!("{passes} passes"));
    report(
        "distribution invariants",
        &failures,
        &format!("{passes} forward passes, worst mass error {worst:.1e}, {diagonal_checked} diagonal entries exactly 0"),
    );
}

/// Exhaustive reference: the highest-scoring legal pair, earliest in
/// row-major order among ties, with the NULL pair listed last.
fn brute_force(pb: &[f64], pe: &[f64], null: usize, max_len: usize) -> (usize, usize, f64) {
    let mut pairs = Vec::new();
    for i in 0..null {
        for j in 0..null {
            if i <= j && j - i < max_len {
                pairs.push((i, j, pb[i] * pe[j]));
            }
        }
    }
    pairs.push((null, null, pb[null] * pe[null]));
    let best = pairs.iter().map(|p| p.2).fold(f64::NEG_INFINITY, f64::max);
    *pairs.iter().find(|p| p.2 == best).unwrap()
}

fn random_distribution(rng: &mut impl Rng, n: usize, coarse: bool) -> Vec<f64> {
    let raw: Vec<f64> = (0..n)
        .map(|_| if coarse { rng.gen_range(0..3) as f64 } else { rng.gen::<f64>() })
        .collect();
    let total: f64 = raw.iter().sum();
    if total == 0.0 {
        return vec![1.0 / n as f64; n];
    }
    raw.iter().map(|x| x / total).collect()
}

#[test]
fn decoding_matches_brute_force() {
    let _guard = serial();
    let mut failures = Vec::new();
    let mut rng = seeded(77);
    let mut nulls = 0;
    for case in 0..10_000 {
        let n = rng.gen_range(1..=12);
        // Every fourth case draws from few levels, forcing ties.
        let coarse = case % 4 == 0;
        let pb = random_distribution(&mut rng, n, coarse);
        let pe = random_distribution(&mut rng, n, coarse);
        let max_len = rng.gen_range(1..=13);
        let got = decode_span(&pb, &pe, n - 1, max_len);
        let want = brute_force(&pb, &pe, n - 1, max_len);
        nulls += usize::from(got.is_null);
        if (got.begin, got.end, got.span_score) != want {
            failures.push(format!("case {case}: got ({}, {}) want ({}, {})", got.begin, got.end, want.0, want.1));
        }
    }
    failures.truncate(5);
    report("decoding oracle", &failures, &format!("10000 cases agree, {nulls} decoded to NULL"));
}

#[derive(Deserialize)]
struct Aggregate {
    exact: f64,
    f1: f64,
    total: usize,
}

#[derive(Deserialize)]
struct QuestionExpectation {
    exact: f64,
    f1: f64,
}

#[derive(Deserialize)]
struct Expected {
    all: Aggregate,
    has_ans: Aggregate,
    no_ans: Aggregate,
    questions: BTreeMap<String, QuestionExpectation>,
}

#[test]
fn metric_matches_reference_scorer() {
    let _guard = serial();
    let mut failures = Vec::new();
    let read = |name: &str| std::fs::read_to_string(fixture(&format!("scorer/{name}"))).unwrap();
    let gold = parse_gold(&read("dev.json")).unwrap();
    let predictions = parse_predictions(&read("predictions.json")).unwrap();
    let expected: Expected = serde_json::from_str(&read("expected.json")).unwrap();
    let r = evaluate(&gold, &predictions, None, 0.5);
    check(&mut failures, expected.questions.len() == 20 && r.total == 20, "fixture is not 20 questions");
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;
    for q in &r.questions {
        let e = &expected.questions[&q.id];
        check(
            &mut failures,
            close(q.em, e.exact) && close(q.f1, e.f1),
            format!("{}: ({}, {}) vs ({}, {})", q.id, q.em, q.f1, e.exact, e.f1),
        );
    }
    for (name, got, want) in [
        ("all", (r.em, r.f1, r.total), &expected.all),
        ("answerable", (r.has_answer.em, r.has_answer.f1, r.has_answer.total), &expected.has_ans),
        ("unanswerable", (r.no_answer.em, r.no_answer.f1, r.no_answer.total), &expected.no_ans),
    ] {
        check(
            &mut failures,
            close(got.0, want.exact) && close(got.1, want.f1) && got.2 == want.total,
            format!("{name}: {got:?} vs ({}, {}, {})", want.exact, want.f1, want.total),
        );
    }
    let ids = |p: &str| expected.questions.keys().any(|k| k.starts_with(p));
    check(
        &mut failures,
        ids("both-empty") && ids("gold-empty") && ids("gold-text-pred-empty") && ids("multi-gold") && ids("case-punct") && ids("article"),
        "fixture lacks a required case",
    );
    report("metric oracle", &failures, &format!("20 questions, EM {:.4}, F1 {:.10}", r.em, r.f1));
}

/// A few synthetic examples with a tiny model, for recipe checks.
fn small_setup(lambda: f64, variant: Variant) -> (Trainer, Corpus) {
    let text = std::fs::read_to_string(repo_root().join("crates/core/data/synthetic/train.json")).unwrap();
    let mut examples = parse_dataset(&text).unwrap().examples;
    examples.truncate(4);
    let mut vocabs = joint_san::data::Vocabularies::default();
    let tagger = joint_san::data::DefaultTagger;
    joint_san::data::extend_vocabularies(&mut vocabs, &examples, &tagger);
    let features = examples.iter().map(|e| joint_san::data::featurize(e, &vocabs, &tagger)).collect();
    let corpus = Corpus::new(examples, features);
    let config = TrainConfig {
        variant,
        hidden_size: 4,
        pos_dim: 2,
        ner_dim: 2,
        steps: 2,
        batch_size: 2,
        lambda,
        epochs: 21,
        ..TrainConfig::default()
    };
    let mut rng = seeded(5);
    let table = joint_san::data::random_embeddings(&vocabs.words, 6, &mut rng);
    let model = SanModel::new(config.model_config(&vocabs, 6, None), table, &mut rng).unwrap();
    (Trainer::new(config, model, rng), corpus)
}

#[test]
fn recipe_conformance() {
    let _guard = serial();
    let mut failures = Vec::new();

    // Learning-rate schedule, both as a function and as logged by training.
    let (mut trainer, corpus) = small_setup(1.0, Variant::JointClassifier);
    let mut logged = Vec::new();
    for _ in 0..21 {
        logged.push(trainer.run_epoch(&corpus, None).unwrap().0.lr);
    }
    let expected: Vec<f64> = (1..=21)
        .map(|e| if e <= 10 { 0.002 } else if e <= 20 { 0.001 } else { 0.0005 })
        .collect();
    check(&mut failures, logged == expected, format!("logged schedule {logged:?}"));
    let computed: Vec<f64> = (1..=21).map(|e| learning_rate(0.002, 10, e)).collect();
    check(&mut failures, computed == expected, "learning_rate disagrees with the schedule");

    // lambda = 0 leaves every classifier parameter bit-unchanged.
    for (lambda, variant) in [(0.0, Variant::JointClassifier), (1.0, Variant::SpanOnly)] {
        let (mut trainer, corpus) = small_setup(lambda, variant);
        let ids = trainer.model.classifier_ids();
        let before: Vec<Tensor> = ids.iter().map(|&id| trainer.model.params.get(id).clone()).collect();
        let others_before = trainer.model.params.get(trainer.model.answer.w1).clone();
        for _ in 0..3 {
            trainer.run_epoch(&corpus, None).unwrap();
        }
        let after: Vec<Tensor> = ids.iter().map(|&id| trainer.model.params.get(id).clone()).collect();
        let bits = |ts: &[Tensor]| -> Vec<u64> { ts.iter().flat_map(|t| t.data().iter().map(|x| x.to_bits())).collect() };
        check(
            &mut failures,
            bits(&before) == bits(&after),
            format!("classifier changed with lambda {lambda} under {}", variant.name()),
        );
        check(
            &mut failures,
            &others_before != trainer.model.params.get(trainer.model.answer.w1),
            "span parameters did not train",
        );
    }

    // P_u above the threshold empties the answer; at or below it does not.
    let ex = parse_dataset(
        r#"{"data":[{"paragraphs":[{"context":"Super Bowl 50 was an American football game.","qas":[{"id":"q","question":"What game?","answers":[{"text":"American football game","answer_start":21}]}]}]}]}"#,
    )
    .unwrap()
    .examples
    .remove(0);
    let mut pb = vec![0.0; ex.passage_tokens.len()];
    let mut pe = pb.clone();
    pb[5] = 1.0;
    pe[7] = 1.0;
    let span = decode_span(&pb, &pe, ex.null_index(), 15);
    for (p_u, thr, want) in [
        (0.9, 0.5, ""),
        (0.500001, 0.5, ""),
        (0.5, 0.5, "American football game"),
        (0.9, 1.0, "American football game"),
        (0.1, 0.5, "American football game"),
    ] {
        let got = override_answer(&span, p_u, thr, &ex).answer;
        check(&mut failures, got == want, format!("P_u {p_u} threshold {thr}: {got:?}"));
    }
    // End to end on a trained model: every P_u > 0.5 prediction is empty
    // under the classifier variant, and the span-only variant never empties
    // a non-NULL span.
    let (mut trainer, corpus) = small_setup(1.0, Variant::JointClassifier);
    for _ in 0..5 {
        trainer.run_epoch(&corpus, None).unwrap();
    }
    let items = corpus.items();
    let with = predict(&trainer.model, &items, Variant::JointClassifier, 0.5, 1).unwrap();
    let without = predict(&trainer.model, &items, Variant::Joint, 0.5, 1).unwrap();
    for (a, b) in with.iter().zip(&without) {
        if a.p_unanswerable > 0.5 {
            check(&mut failures, a.answer.is_empty(), format!("{} kept an answer at P_u {}", a.id, a.p_unanswerable));
        } else {
            check(&mut failures, a.answer == b.answer, format!("{} changed below the threshold", a.id));
        }
        check(&mut failures, b.is_null == b.answer.is_empty(), format!("{} joint variant emptied a span", b.id));
    }
    report(
        "recipe conformance",
        &failures,
        "lr 0.002 / 0.001 from epoch 11 / 0.0005 from epoch 21; lambda 0 freezes the classifier bit-for-bit; P_u > 0.5 empties answers",
    );
}

fn toy_run(dir: &Path) -> (Vec<u8>, Vec<u8>, Vec<u8>) {
    let corpus = repo_root().join("crates/core/data/synthetic");
    let args = [
        ("train_file", corpus.join("train.json").display().to_string()),
        ("dev_file", corpus.join("dev.json").display().to_string()),
        ("cache_dir", dir.join("cache").display().to_string()),
        ("checkpoint_dir", dir.join("ckpt").display().to_string()),
        ("predictions_file", dir.join("pred.json").display().to_string()),
        ("na_probs_file", dir.join("na.json").display().to_string()),
        ("embedding_dim", "8".into()),
        ("hidden_size", "6".into()),
        ("steps", "3".into()),
        ("batch_size", "8".into()),
        ("epochs", "3".into()),
        ("seed", "99".into()),
    ];
    let overrides: Vec<String> = args.iter().flat_map(|(k, v)| [format!("--{k}"), v.clone()]).collect();
    let cfg = RunConfig::load(None, &overrides).unwrap();
    commands::train(&cfg, &mut Vec::new()).unwrap();
    commands::predict_cmd(&cfg, &mut Vec::new()).unwrap();
    let read = |p: PathBuf| std::fs::read(p).unwrap();
    (read(cfg.metrics_path()), read(cfg.predictions_file.clone()), read(dir.join("na.json")))
}

#[test]
fn determinism() {
    let _guard = serial();
    let mut failures = Vec::new();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = toy_run(a.path());
    let second = toy_run(b.path());
    check(&mut failures, first.0 == second.0, "metrics logs differ");
    check(&mut failures, first.1 == second.1, "predictions differ");
    check(&mut failures, first.2 == second.2, "no-answer probabilities differ");
    let log: Vec<EpochMetrics> = String::from_utf8(first.0.clone())
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    check(&mut failures, log.len() == 3, format!("{} metric records", log.len()));
    report(
        "determinism",
        &failures,
        &format!("metrics ({} bytes) and predictions ({} bytes) identical across runs", first.0.len(), first.1.len()),
    );
}
