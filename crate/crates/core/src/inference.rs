//! Evaluation-mode prediction, sharded across threads with a deterministic
//! merge order.

use std::collections::BTreeMap;

use crate::answer::{decode_span, SpanPrediction};
use crate::classifier::{override_answer, Prediction};
use crate::data::{ContextualVectors, Example, FeaturizedExample};
use crate::model::{Mode, SanModel, Variant};
use crate::params::Bound;
use crate::tensor::{Graph, Result};

/// Examples per graph.
pub const CHUNK: usize = 16;

#[derive(Clone, Copy)]
pub struct PredictItem<'a> {
    pub example: &'a Example,
    pub features: &'a FeaturizedExample,
    pub contextual: Option<&'a ContextualVectors>,
}

/// Threshold actually applied for a variant: only the classifier variant
/// overrides spans.
pub fn override_threshold(variant: Variant, threshold: f64) -> f64 {
    if variant.uses_override() {
        threshold
    } else {
        f64::INFINITY
    }
}

/// Span decoding and `P_u` for a chunk of examples on one graph.
pub fn score_chunk(model: &SanModel, items: &[PredictItem]) -> Result<Vec<(SpanPrediction, f64)>> {
    let mut g = Graph::new();
    let binding = model.params.bind_constant(&mut g);
    let p = Bound::new(&model.params, &binding);
    let mut out = Vec::with_capacity(items.len());
    for item in items {
        let fwd = model.forward(&mut g, p, item.features, item.contextual, &mut Mode::eval())?;
        let null = item.features.null_index();
        let span = decode_span(
            g.value(fwd.p_begin).data(),
            g.value(fwd.p_end).data(),
            null,
            model.config.max_span_len,
        );
        out.push((span, g.value(fwd.p_u).item()));
    }
    Ok(out)
}

/// Predictions in input order. `workers` threads each take every
/// `workers`-th chunk; results are merged by position.
/// Decoded span and `P_u` of one example.
type Scored = (SpanPrediction, f64);

pub fn predict(model: &SanModel, items: &[PredictItem], variant: Variant, threshold: f64, workers: usize) -> Result<Vec<Prediction>> {
    let threshold = override_threshold(variant, threshold);
    let chunks: Vec<&[PredictItem]> = items.chunks(CHUNK).collect();
    let workers = workers.clamp(1, chunks.len().max(1));
    let mut scored: Vec<Option<Result<Vec<Scored>>>> = (0..chunks.len()).map(|_| None).collect();
    if workers == 1 {
        for (i, chunk) in chunks.iter().enumerate() {
            scored[i] = Some(score_chunk(model, chunk));
        }
    } else {
        let per_worker: Vec<Vec<(usize, Result<Vec<Scored>>)>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let chunks = &chunks;
                    s.spawn(move || {
                        (w..chunks.len())
                            .step_by(workers)
                            .map(|i| (i, score_chunk(model, chunks[i])))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("prediction worker panicked")).collect()
        });
        for (i, r) in per_worker.into_iter().flatten() {
            scored[i] = Some(r);
        }
    }
    let mut out = Vec::with_capacity(items.len());
    let mut item_iter = items.iter();
    for chunk in scored {
        for (span, p_u) in chunk.expect("every chunk scored")? {
            let item = item_iter.next().expect("one item per result");
            out.push(override_answer(&span, p_u, threshold, item.example));
        }
    }
    Ok(out)
}

/// Question id to answer string, the layout the scorer reads.
pub fn answer_map(predictions: &[Prediction]) -> BTreeMap<String, String> {
    predictions.iter().map(|p| (p.id.clone(), p.answer.clone())).collect()
}

/// Question id to `P_u`.
pub fn na_prob_map(predictions: &[Prediction]) -> BTreeMap<String, f64> {
    predictions.iter().map(|p| (p.id.clone(), p.p_unanswerable)).collect()
}
