//! Span, classifier and joint objectives.

use crate::data::{ContextualVectors, FeaturizedExample};
use crate::model::{Mode, SanModel};
use crate::params::Bound;
use crate::tensor::{Graph, Result, Var};

/// Probabilities are clamped to `[PROB_FLOOR, 1]` before the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// `-(ln P_begin[b] + ln P_end[e])` with clamped probabilities.
pub fn span_loss(g: &mut Graph, p_begin: Var, p_end: Var, gold: (usize, usize)) -> Result<Var> {
    let b = g.pick(p_begin, gold.0)?;
    let e = g.pick(p_end, gold.1)?;
    let lb = g.log_clamped(b, PROB_FLOOR, 1.0)?;
    let le = g.log_clamped(e, PROB_FLOOR, 1.0)?;
    let total = g.add(lb, le)?;
    g.scale(total, -1.0)
}

/// Binary cross-entropy of `P_u` against the unanswerable label.
pub fn classifier_loss(g: &mut Graph, p_u: Var, unanswerable: bool) -> Result<Var> {
    let prob = if unanswerable { p_u } else { g.affine(p_u, -1.0, 1.0)? };
    let ll = g.log_clamped(prob, PROB_FLOOR, 1.0)?;
    g.scale(ll, -1.0)
}

/// `L_span + lambda * L_cls`. With `lambda == 0` the classifier term is left
/// out of the graph entirely.
pub fn joint_loss(g: &mut Graph, span: Var, classifier: Var, lambda: f64) -> Result<Var> {
    if lambda == 0.0 {
        return Ok(span);
    }
    let weighted = g.scale(classifier, lambda)?;
    g.add(span, weighted)
}

/// Mean losses over a batch; `joint` is the differentiable root.
pub struct BatchLoss {
    pub joint: Var,
    pub span: f64,
    pub classifier: f64,
    pub joint_value: f64,
}

pub fn batch_loss(
    g: &mut Graph,
    model: &SanModel,
    p: Bound,
    batch: &[(&FeaturizedExample, Option<&ContextualVectors>)],
    lambda: f64,
    mode: &mut Mode,
) -> Result<BatchLoss> {
    assert!(!batch.is_empty(), "empty batch");
    let (mut span_sum, mut cls_sum) = (0.0, 0.0);
    let mut total: Option<Var> = None;
    for (fe, ctx) in batch {
        let fwd = model.forward(g, p, fe, *ctx, mode)?;
        let span = span_loss(g, fwd.p_begin, fwd.p_end, fe.span)?;
        let cls = classifier_loss(g, fwd.p_u, fe.is_unanswerable)?;
        span_sum += g.value(span).item();
        cls_sum += g.value(cls).item();
        let joint = joint_loss(g, span, cls, lambda)?;
        total = Some(match total {
            Some(t) => g.add(t, joint)?,
            None => joint,
        });
    }
    let k = batch.len() as f64;
    let joint = g.scale(total.expect("non-empty batch"), 1.0 / k)?;
    Ok(BatchLoss {
        joint,
        span: span_sum / k,
        classifier: cls_sum / k,
        joint_value: g.value(joint).item(),
    })
}
