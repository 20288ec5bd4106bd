//! Joint training loop: seeded shuffling, unknown-word masking, Adamax with
//! clipping, and per-epoch metrics.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{mask_unknown_words, ContextualVectors, Example, FeaturizedExample, GoldQuestion, Vocabularies};
use crate::error::{Error, Result};
use crate::evaluation::evaluate;
use crate::inference::{na_prob_map, answer_map, predict, PredictItem};
use crate::loss::batch_loss;
use crate::model::{Mode, ModelConfig, SanModel, Variant};
use crate::optim::{clip_global_norm, learning_rate, Adamax};
use crate::params::Bound;
use crate::rng::SanRng;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub hidden_size: usize,
    pub pos_dim: usize,
    pub ner_dim: usize,
    pub steps: usize,
    pub max_span_len: usize,
    pub tune_embeddings: bool,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_halving_period: usize,
    pub dropout: f64,
    pub step_dropout: f64,
    pub unk_mask_rate: f64,
    pub lambda: f64,
    pub threshold: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::JointClassifier,
            hidden_size: 128,
            pos_dim: 16,
            ner_dim: 8,
            steps: 5,
            max_span_len: 15,
            tune_embeddings: false,
            batch_size: 32,
            lr: 0.002,
            lr_halving_period: 10,
            dropout: 0.1,
            step_dropout: 0.4,
            unk_mask_rate: 0.005,
            lambda: 1.0,
            threshold: 0.5,
            grad_clip: 5.0,
            seed: 1234,
            epochs: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return fail(format!("lambda must be a non-negative number, got {}", self.lambda));
        }
        for (name, rate) in [
            ("dropout", self.dropout),
            ("step_dropout", self.step_dropout),
            ("unk_mask_rate", self.unk_mask_rate),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return fail(format!("{name} must lie in [0, 1), got {rate}"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        // Written as a negation so that NaN is rejected too.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.grad_clip > 0.0) {
            return fail(format!("grad_clip must be positive, got {}", self.grad_clip));
        }
        for (name, v) in [
            ("hidden_size", self.hidden_size),
            ("pos_dim", self.pos_dim),
            ("ner_dim", self.ner_dim),
            ("steps", self.steps),
            ("max_span_len", self.max_span_len),
            ("batch_size", self.batch_size),
            ("lr_halving_period", self.lr_halving_period),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        Ok(())
    }

    pub fn model_config(&self, vocabs: &Vocabularies, embedding_dim: usize, contextual_dim: Option<usize>) -> ModelConfig {
        ModelConfig {
            word_vocab_size: vocabs.words.len(),
            embedding_dim,
            pos_vocab_size: vocabs.pos.len(),
            ner_vocab_size: vocabs.ner.len(),
            pos_dim: self.pos_dim,
            ner_dim: self.ner_dim,
            hidden_size: self.hidden_size,
            contextual_dim,
            steps: self.steps,
            max_span_len: self.max_span_len,
            tune_embeddings: self.tune_embeddings,
        }
    }

    /// Classifier loss weight after the variant is applied.
    pub fn effective_lambda(&self) -> f64 {
        self.variant.effective_lambda(self.lambda)
    }
}

/// Examples with their features and optional contextual vectors.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub examples: Vec<Example>,
    pub features: Vec<FeaturizedExample>,
    pub contextual: HashMap<String, ContextualVectors>,
    pub gold: Vec<GoldQuestion>,
}

impl Corpus {
    pub fn new(examples: Vec<Example>, features: Vec<FeaturizedExample>) -> Self {
        assert_eq!(examples.len(), features.len(), "one feature record per example");
        let gold = examples
            .iter()
            .map(|e| GoldQuestion {
                id: e.id.clone(),
                answers: e.gold_answer_texts.clone(),
                is_unanswerable: e.is_unanswerable,
            })
            .collect();
        Corpus {
            examples,
            features,
            contextual: HashMap::new(),
            gold,
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn contextual_for(&self, id: &str) -> Option<&ContextualVectors> {
        self.contextual.get(id)
    }

    pub fn items(&self) -> Vec<PredictItem<'_>> {
        self.examples
            .iter()
            .zip(&self.features)
            .map(|(example, features)| PredictItem {
                example,
                features,
                contextual: self.contextual_for(&example.id),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DevMetrics {
    pub em: f64,
    pub f1: f64,
    pub classifier_accuracy: f64,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub span_loss: f64,
    pub classifier_loss: f64,
    pub joint_loss: f64,
    pub max_grad_norm: f64,
    pub dev: Option<DevMetrics>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub span_loss: f64,
    pub classifier_loss: f64,
    pub joint_loss: f64,
    pub grad_norm: f64,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: SanModel,
    pub optimizer: Adamax,
    pub rng: SanRng,
    /// Completed epochs.
    pub epoch: usize,
    pub best_dev_f1: Option<f64>,
    pub history: Vec<EpochMetrics>,
}

/// Evaluation-mode scores of `model` on a corpus under `variant`.
pub fn evaluate_corpus(model: &SanModel, corpus: &Corpus, variant: Variant, threshold: f64, workers: usize) -> Result<DevMetrics> {
    let preds = predict(model, &corpus.items(), variant, threshold, workers)?;
    let report = evaluate(&corpus.gold, &answer_map(&preds), Some(&na_prob_map(&preds)), threshold);
    Ok(DevMetrics {
        em: report.em,
        f1: report.f1,
        classifier_accuracy: report.classifier_accuracy.unwrap_or(0.0),
    })
}

/// Mean evaluation-mode losses over a corpus, as `(joint, span, classifier)`.
pub fn corpus_loss(model: &SanModel, corpus: &Corpus, lambda: f64) -> Result<(f64, f64, f64)> {
    if corpus.is_empty() {
        return Err(Error::Config("corpus is empty".into()));
    }
    let (mut joint, mut span, mut cls) = (0.0, 0.0, 0.0);
    for chunk in corpus.features.chunks(crate::inference::CHUNK) {
        let mut g = Graph::new();
        let binding = model.params.bind_constant(&mut g);
        let p = Bound::new(&model.params, &binding);
        let batch: Vec<_> = chunk.iter().map(|f| (f, corpus.contextual_for(&f.id))).collect();
        let loss = batch_loss(&mut g, model, p, &batch, lambda, &mut Mode::eval())?;
        let w = batch.len() as f64;
        joint += loss.joint_value * w;
        span += loss.span * w;
        cls += loss.classifier * w;
    }
    let n = corpus.len() as f64;
    Ok((joint / n, span / n, cls / n))
}

impl Trainer {
    pub fn new(config: TrainConfig, model: SanModel, rng: SanRng) -> Self {
        let optimizer = Adamax::new(&model.params);
        Trainer {
            config,
            model,
            optimizer,
            rng,
            epoch: 0,
            best_dev_f1: None,
            history: Vec::new(),
        }
    }

    /// Forward, backward, clipping and one Adamax update on a batch.
    pub fn train_step(&mut self, batch: &[(&FeaturizedExample, Option<&ContextualVectors>)], lr: f64) -> Result<StepStats> {
        let mut g = Graph::new();
        let binding = self.model.params.bind(&mut g);
        let p = Bound::new(&self.model.params, &binding);
        let mut mode = Mode::train(self.config.dropout, self.config.step_dropout, &mut self.rng);
        let loss = batch_loss(&mut g, &self.model, p, batch, self.config.effective_lambda(), &mut mode)?;
        if !loss.joint_value.is_finite() {
            return Err(Error::NonFinite {
                param: "loss".into(),
                detail: format!("batch loss is {}", loss.joint_value),
            });
        }
        g.backward(loss.joint)?;
        let mut grads: Vec<Option<Tensor>> = self
            .model
            .params
            .ids()
            .map(|id| binding.get(id).map(|v| g.grad(v).expect("gradient after backward")))
            .collect();
        let grad_norm = clip_global_norm(&mut grads, self.config.grad_clip);
        self.optimizer.update(&mut self.model.params, &grads, lr)?;
        Ok(StepStats {
            span_loss: loss.span,
            classifier_loss: loss.classifier,
            joint_loss: loss.joint_value,
            grad_norm,
        })
    }

    pub fn current_lr(&self) -> f64 {
        learning_rate(self.config.lr, self.config.lr_halving_period, self.epoch + 1)
    }

    /// Trains one epoch and evaluates on `dev` when given. Returns the
    /// epoch's metrics and whether dev F1 improved on the best so far.
    pub fn run_epoch(&mut self, train: &Corpus, dev: Option<&Corpus>) -> Result<(EpochMetrics, bool)> {
        if train.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let lr = self.current_lr();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut span, mut cls, mut joint, mut max_norm) = (0.0, 0.0, 0.0, 0.0f64);
        for chunk in order.chunks(self.config.batch_size) {
            let mut batch: Vec<FeaturizedExample> = chunk.iter().map(|&i| train.features[i].clone()).collect();
            mask_unknown_words(&mut batch, self.config.unk_mask_rate, &mut self.rng);
            let pairs: Vec<_> = batch.iter().map(|f| (f, train.contextual_for(&f.id))).collect();
            let stats = self.train_step(&pairs, lr)?;
            let k = chunk.len() as f64;
            span += stats.span_loss * k;
            cls += stats.classifier_loss * k;
            joint += stats.joint_loss * k;
            max_norm = max_norm.max(stats.grad_norm);
        }
        let n = train.len() as f64;
        let dev_metrics = match dev {
            Some(d) if !d.is_empty() => Some(evaluate_corpus(&self.model, d, self.config.variant, self.config.threshold, 1)?),
            _ => None,
        };
        self.epoch += 1;
        let improved = match &dev_metrics {
            Some(m) => self.best_dev_f1.is_none_or(|b| m.f1 > b),
            None => false,
        };
        if improved {
            self.best_dev_f1 = dev_metrics.as_ref().map(|m| m.f1);
        }
        let metrics = EpochMetrics {
            epoch: self.epoch,
            lr,
            span_loss: span / n,
            classifier_loss: cls / n,
            joint_loss: joint / n,
            max_grad_norm: max_norm,
            dev: dev_metrics,
        };
        self.history.push(metrics.clone());
        Ok((metrics, improved))
    }
}
