//! The full model: shared encoder, span detector and unanswerable classifier.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::answer::{span_distributions, AnswerParams};
use crate::classifier::{classify, memory_summary, ClassifierParams};
use crate::data::{ContextualVectors, FeaturizedExample};
use crate::encoder::{build_memory, contextual_encode, lexicon_encode, ContextualInput, EncoderParams};
use crate::error::Error;
use crate::params::{Bound, ParamId, ParamSet};
use crate::rng::SanRng;
use crate::tensor::{Graph, Result, Tensor, TensorError, Var};

/// The three training/decoding configurations compared in the evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Span detector alone; the classifier loss weight is forced to zero.
    SpanOnly,
    /// Joint training, answers decoded from the span detector only.
    Joint,
    /// Joint training plus the classifier threshold override at decoding.
    JointClassifier,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::SpanOnly, Variant::Joint, Variant::JointClassifier];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SpanOnly => "span-only",
            Variant::Joint => "joint",
            Variant::JointClassifier => "joint-classifier",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn uses_override(self) -> bool {
        self == Variant::JointClassifier
    }

    /// Classifier loss weight actually used for a configured `lambda`.
    pub fn effective_lambda(self, lambda: f64) -> f64 {
        match self {
            Variant::SpanOnly => 0.0,
            _ => lambda,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub word_vocab_size: usize,
    pub embedding_dim: usize,
    pub pos_vocab_size: usize,
    pub ner_vocab_size: usize,
    pub pos_dim: usize,
    pub ner_dim: usize,
    /// `d`: FFN output size and per-direction recurrent size.
    pub hidden_size: usize,
    pub contextual_dim: Option<usize>,
    /// `T`, the number of reasoning steps.
    pub steps: usize,
    pub max_span_len: usize,
    pub tune_embeddings: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("word_vocab_size", self.word_vocab_size),
            ("embedding_dim", self.embedding_dim),
            ("pos_vocab_size", self.pos_vocab_size),
            ("ner_vocab_size", self.ner_vocab_size),
            ("pos_dim", self.pos_dim),
            ("ner_dim", self.ner_dim),
            ("hidden_size", self.hidden_size),
            ("steps", self.steps),
            ("max_span_len", self.max_span_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(TensorError::Config(format!("{name} must be positive")));
        }
        if self.contextual_dim == Some(0) {
            return Err(TensorError::Config("contextual_dim must be positive".into()));
        }
        Ok(())
    }

    /// Rows of `H_q`, `H_p` and of the answer-module state.
    pub fn state_dim(&self) -> usize {
        4 * self.hidden_size
    }

    /// Rows of the memory `M`.
    pub fn memory_dim(&self) -> usize {
        2 * self.hidden_size
    }
}

/// Training or evaluation behaviour of one forward pass.
pub struct Mode<'r> {
    pub training: bool,
    pub dropout: f64,
    pub step_dropout: f64,
    pub rng: Option<&'r mut SanRng>,
}

impl Mode<'static> {
    pub fn eval() -> Self {
        Mode {
            training: false,
            dropout: 0.0,
            step_dropout: 0.0,
            rng: None,
        }
    }
}

impl<'r> Mode<'r> {
    pub fn train(dropout: f64, step_dropout: f64, rng: &'r mut SanRng) -> Self {
        Mode {
            training: true,
            dropout,
            step_dropout,
            rng: Some(rng),
        }
    }

    pub fn dropout(&mut self, g: &mut Graph, v: Var) -> Result<Var> {
        match (self.training, self.rng.as_deref_mut()) {
            (true, Some(rng)) => g.dropout(v, self.dropout, true, rng),
            _ => Ok(v),
        }
    }
}

/// Intermediate distributions kept for inspection.
pub struct Trace {
    /// `n x m` word-level alignment of passage to question.
    pub align_attention: Var,
    /// `m x n`, before dropout.
    pub question_attention: Var,
    pub self_attention: Var,
    pub alpha: Var,
    pub betas: Vec<Var>,
    pub kept_steps: Vec<usize>,
    pub step_begin: Vec<Var>,
    pub step_end: Vec<Var>,
    pub gamma: Var,
    pub memory: Var,
}

pub struct Forward {
    pub p_begin: Var,
    pub p_end: Var,
    pub logit: Var,
    pub p_u: Var,
    pub trace: Trace,
}

pub struct SanModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub encoder: EncoderParams,
    pub answer: AnswerParams,
    pub classifier: ClassifierParams,
}

impl SanModel {
    /// Fresh model; `embeddings` is the `vocab x embedding_dim` word table.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, embeddings: Tensor, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let expected = [config.word_vocab_size, config.embedding_dim];
        if embeddings.shape() != expected {
            return Err(TensorError::Shape {
                op: "word embedding table",
                lhs: expected.to_vec(),
                rhs: embeddings.shape().to_vec(),
            });
        }
        let mut params = ParamSet::new();
        let encoder = EncoderParams::new(&mut params, &config, embeddings, rng);
        let answer = AnswerParams::new(&mut params, config.state_dim(), config.memory_dim(), config.steps, rng);
        let classifier = ClassifierParams::new(&mut params, config.state_dim(), config.memory_dim(), rng);
        Ok(SanModel {
            config,
            params,
            encoder,
            answer,
            classifier,
        })
    }

    /// Rebuilds a model from stored tensors, matching by name and shape.
    pub fn from_tensors<'t>(
        config: ModelConfig,
        mut lookup: impl FnMut(&str) -> Option<&'t Tensor>,
    ) -> std::result::Result<Self, Error> {
        // Check the tensors that pin every size in the configuration before
        // allocating anything, so a forged header cannot demand huge buffers.
        let c = &config;
        let d = c.hidden_size;
        let dw = c.embedding_dim;
        let passage_in = dw
            .checked_mul(2)
            .and_then(|x| x.checked_add(c.pos_dim)?.checked_add(c.ner_dim)?.checked_add(crate::encoder::HAND_FEATURES));
        let anchors = [
            ("encoder.word_embedding", Some(c.word_vocab_size), Some(dw)),
            ("encoder.pos_embedding", Some(c.pos_vocab_size), Some(c.pos_dim)),
            ("encoder.ner_embedding", Some(c.ner_vocab_size), Some(c.ner_dim)),
            ("encoder.align", Some(dw), Some(dw)),
            ("encoder.memory.question_proj", Some(d), d.checked_mul(4)),
            ("encoder.passage_ffn.w1", Some(d), passage_in),
            (
                "encoder.contextual1.forward.w_input",
                d.checked_mul(4),
                d.checked_add(c.contextual_dim.unwrap_or(0)),
            ),
        ];
        for (name, rows, cols) in anchors {
            let stored = lookup(name).ok_or_else(|| Error::Incompatible(format!("missing parameter {name}")))?;
            if rows.zip(cols).map(|(r, k)| vec![r, k]).as_deref() != Some(stored.shape()) {
                return Err(Error::Incompatible(format!(
                    "parameter {name} has shape {:?}, which the configuration does not match",
                    stored.shape()
                )));
            }
        }
        let embeddings = Tensor::zeros(&[config.word_vocab_size.max(1), config.embedding_dim.max(1)]);
        let mut model = SanModel::new(config, embeddings, &mut crate::rng::seeded(0))
            .map_err(|e| Error::Incompatible(e.to_string()))?;
        let ids: Vec<ParamId> = model.params.ids().collect();
        for id in ids {
            let name = model.params.entry(id).name.clone();
            let stored = lookup(&name).ok_or_else(|| Error::Incompatible(format!("missing parameter {name}")))?;
            let slot = model.params.get_mut(id);
            if stored.shape() != slot.shape() {
                return Err(Error::Incompatible(format!(
                    "parameter {name} has shape {:?}, configuration expects {:?}",
                    stored.shape(),
                    slot.shape()
                )));
            }
            *slot = stored.clone();
        }
        Ok(model)
    }

    pub fn classifier_ids(&self) -> Vec<ParamId> {
        self.classifier.ids().to_vec()
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: Bound,
        features: &FeaturizedExample,
        contextual: Option<&ContextualVectors>,
        mode: &mut Mode,
    ) -> Result<Forward> {
        let fe = features;
        if fe.passage_len == 0 || fe.question_len == 0 {
            return Err(TensorError::Usage(format!("example {} has an empty sequence", fe.id)));
        }
        let lex = lexicon_encode(g, p, &self.encoder, fe, mode)?;
        let ctx = contextual.map(|c| ContextualInput {
            question: &c.question,
            passage: &c.passage,
        });
        let (h_q, h_p) = contextual_encode(g, p, &self.encoder, &lex, ctx, fe, self.config.contextual_dim, mode)?;
        let mem = build_memory(g, p, &self.encoder, h_q, h_p, fe.question_len, fe.passage_len, mode)?;
        let spans = span_distributions(
            g,
            p,
            &self.answer,
            h_q,
            mem.memory,
            fe.question_len,
            fe.passage_len,
            mode,
        )?;
        let (m0, gamma) = memory_summary(g, p, &self.classifier, mem.memory, fe.passage_len)?;
        let (logit, p_u) = classify(g, p, &self.classifier, spans.states[0], m0)?;
        Ok(Forward {
            p_begin: spans.p_begin,
            p_end: spans.p_end,
            logit,
            p_u,
            trace: Trace {
                align_attention: lex.align_attention,
                question_attention: mem.question_attention,
                self_attention: mem.self_attention,
                alpha: spans.alpha,
                betas: spans.betas,
                kept_steps: spans.kept_steps,
                step_begin: spans.step_begin,
                step_end: spans.step_end,
                gamma,
                memory: mem.memory,
            },
        })
    }
}
