//! Unanswerable-question head and the threshold override.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::answer::{attentive_summary, SpanPrediction};
use crate::data::Example;
use crate::params::{Bound, ParamId, ParamSet};
use crate::tensor::{Graph, Result, Var};

#[derive(Clone, Debug)]
pub struct ClassifierParams {
    pub w5: ParamId,
    pub w4: ParamId,
}

impl ClassifierParams {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, state_dim: usize, memory_dim: usize, rng: &mut R) -> Self {
        let input = state_dim + memory_dim;
        ClassifierParams {
            w5: params.add_uniform("classifier.w5", &[1, memory_dim], 1.0 / (memory_dim as f64).sqrt(), rng),
            w4: params.add_uniform("classifier.w4", &[1, input], 1.0 / (input as f64).sqrt(), rng),
        }
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.w5, self.w4]
    }
}

/// Memory summary `m0`; returns `(m0, gamma)`.
pub fn memory_summary(g: &mut Graph, p: Bound, params: &ClassifierParams, memory: Var, passage_len: usize) -> Result<(Var, Var)> {
    let w5 = p.var(g, params.w5);
    attentive_summary(g, w5, memory, passage_len)
}

/// Returns `(logit, P_u)` with `P_u = sigmoid(W4 [s0; m0])`.
pub fn classify(g: &mut Graph, p: Bound, params: &ClassifierParams, s0: Var, m0: Var) -> Result<(Var, Var)> {
    let w4 = p.var(g, params.w4);
    let joined = g.concat(&[s0, m0], 0)?;
    let logit = g.matmul(w4, joined)?;
    let p_u = g.sigmoid(logit)?;
    Ok((logit, p_u))
}

/// Final answer for one question.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub answer: String,
    pub begin: usize,
    pub end: usize,
    pub span_score: f64,
    pub p_unanswerable: f64,
    pub is_null: bool,
}

/// Empties the answer when `p_u` is strictly above `threshold`; otherwise
/// returns the span text (empty for the NULL span).
pub fn override_answer(span: &SpanPrediction, p_u: f64, threshold: f64, example: &Example) -> Prediction {
    let overridden = p_u > threshold;
    let is_null = overridden || span.is_null;
    let answer = if is_null {
        String::new()
    } else {
        example.span_text(span.begin, span.end)
    };
    Prediction {
        id: example.id.clone(),
        answer,
        begin: span.begin,
        end: span.end,
        span_score: span.span_score,
        p_unanswerable: p_u,
        is_null,
    }
}
