//! Multi-step span detector and span decoding.

use rand::Rng;

use crate::model::Mode;
use crate::params::{Bound, ParamId, ParamSet};
use crate::tensor::{Graph, Result, Var};

/// GRU cell with update gate `z`, reset gate `r` and the convention
/// `s' = (1 - z) * s + z * candidate`.
#[derive(Clone, Debug)]
pub struct GruParams {
    /// Input weights for `[z; r; candidate]`.
    pub w_input: ParamId,
    /// State weights for `[z; r]`.
    pub w_gates: ParamId,
    /// State weights applied to `r * s` for the candidate.
    pub w_candidate: ParamId,
    pub bias: ParamId,
    pub state: usize,
}

impl GruParams {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, prefix: &str, input: usize, state: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (state as f64).sqrt();
        GruParams {
            w_input: params.add_uniform(&format!("{prefix}.w_input"), &[3 * state, input], bound, rng),
            w_gates: params.add_uniform(&format!("{prefix}.w_gates"), &[2 * state, state], bound, rng),
            w_candidate: params.add_uniform(&format!("{prefix}.w_candidate"), &[state, state], bound, rng),
            bias: params.add_uniform(&format!("{prefix}.bias"), &[3 * state, 1], bound, rng),
            state,
        }
    }

    pub fn step(&self, g: &mut Graph, p: Bound, s_prev: Var, x: Var) -> Result<Var> {
        let h = self.state;
        let (w_in, w_gates, w_cand, bias) = (
            p.var(g, self.w_input),
            p.var(g, self.w_gates),
            p.var(g, self.w_candidate),
            p.var(g, self.bias),
        );
        let from_input = g.matmul(w_in, x)?;
        let from_input = g.add(from_input, bias)?;
        let gate_in = g.slice_rows(from_input, 0, 2 * h)?;
        let gate_state = g.matmul(w_gates, s_prev)?;
        let gates = g.add(gate_in, gate_state)?;
        let gates = g.sigmoid(gates)?;
        let z = g.slice_rows(gates, 0, h)?;
        let r = g.slice_rows(gates, h, h)?;
        let reset = g.mul(r, s_prev)?;
        let cand_state = g.matmul(w_cand, reset)?;
        let cand_in = g.slice_rows(from_input, 2 * h, h)?;
        let cand = g.add(cand_in, cand_state)?;
        let cand = g.tanh(cand)?;
        let delta = g.sub(cand, s_prev)?;
        let moved = g.mul(z, delta)?;
        g.add(s_prev, moved)
    }
}

#[derive(Clone, Debug)]
pub struct AnswerParams {
    pub w0: ParamId,
    pub w1: ParamId,
    pub w2: ParamId,
    pub w3: ParamId,
    pub gru: GruParams,
    pub steps: usize,
}

impl AnswerParams {
    /// `state_dim` is the row count of `H_q`, `memory_dim` that of `M`.
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        state_dim: usize,
        memory_dim: usize,
        steps: usize,
        rng: &mut R,
    ) -> Self {
        assert!(steps >= 1, "at least one reasoning step");
        let bs = 1.0 / (state_dim as f64).sqrt();
        AnswerParams {
            w0: params.add_uniform("answer.w0", &[1, state_dim], bs, rng),
            w1: params.add_uniform("answer.w1", &[state_dim, memory_dim], bs, rng),
            w2: params.add_uniform("answer.w2", &[state_dim, memory_dim], bs, rng),
            w3: params.add_uniform("answer.w3", &[state_dim, memory_dim], bs, rng),
            gru: GruParams::new(params, "answer.gru", memory_dim, state_dim, rng),
            steps,
        }
    }
}

/// Keep-mask for a single row of `cols` entries whose first `len` are real.
pub fn prefix_mask(cols: usize, len: usize) -> Vec<bool> {
    (0..cols).map(|j| j < len).collect()
}

/// `softmax(w . columns)` over the first `len` columns and the weighted sum of
/// those columns. Returns `(summary, weights)` with weights `1 x cols`.
pub fn attentive_summary(g: &mut Graph, w: Var, columns: Var, len: usize) -> Result<(Var, Var)> {
    let scores = g.matmul(w, columns)?;
    let cols = g.shape(scores)[1];
    let weights = g.masked_softmax_rows(scores, &prefix_mask(cols, len))?;
    let wt = g.transpose(weights)?;
    let summary = g.matmul(columns, wt)?;
    Ok((summary, weights))
}

/// `softmax(s^T W M)` over the first `len` memory columns.
pub fn bilinear_distribution(g: &mut Graph, s: Var, w: Var, memory: Var, len: usize) -> Result<Var> {
    let st = g.transpose(s)?;
    let sw = g.matmul(st, w)?;
    let scores = g.matmul(sw, memory)?;
    let cols = g.shape(scores)[1];
    g.masked_softmax_rows(scores, &prefix_mask(cols, len))
}

/// Initial state `s0`; returns `(s0, alpha)`.
pub fn initial_state(g: &mut Graph, p: Bound, params: &AnswerParams, h_q: Var, question_len: usize) -> Result<(Var, Var)> {
    let w0 = p.var(g, params.w0);
    attentive_summary(g, w0, h_q, question_len)
}

/// One reasoning step; returns `(s_t, beta)`.
pub fn step(g: &mut Graph, p: Bound, params: &AnswerParams, s_prev: Var, memory: Var, passage_len: usize) -> Result<(Var, Var)> {
    let w1 = p.var(g, params.w1);
    let beta = bilinear_distribution(g, s_prev, w1, memory, passage_len)?;
    let bt = g.transpose(beta)?;
    let x = g.matmul(memory, bt)?;
    let s = params.gru.step(g, p, s_prev, x)?;
    Ok((s, beta))
}

/// Which reasoning steps contribute to the averaged distributions. In
/// training each step is dropped independently; if all are dropped one
/// uniformly chosen step is kept.
pub fn step_keep_mask(steps: usize, mode: &mut Mode) -> Vec<bool> {
    match (mode.training, mode.step_dropout > 0.0, mode.rng.as_deref_mut()) {
        (true, true, Some(rng)) => {
            let mut keep: Vec<bool> = (0..steps).map(|_| !rng.gen_bool(mode.step_dropout)).collect();
            if !keep.contains(&true) {
                keep[rng.gen_range(0..steps)] = true;
            }
            keep
        }
        _ => vec![true; steps],
    }
}

pub struct SpanOutput {
    pub states: Vec<Var>,
    pub alpha: Var,
    pub betas: Vec<Var>,
    /// Per-step distributions of the surviving steps, with their indices.
    pub kept_steps: Vec<usize>,
    pub step_begin: Vec<Var>,
    pub step_end: Vec<Var>,
    pub p_begin: Var,
    pub p_end: Var,
}

/// Runs all `T` steps and averages the begin/end distributions of the kept
/// steps.
#[allow(clippy::too_many_arguments)]
pub fn span_distributions(
    g: &mut Graph,
    p: Bound,
    params: &AnswerParams,
    h_q: Var,
    memory: Var,
    question_len: usize,
    passage_len: usize,
    mode: &mut Mode,
) -> Result<SpanOutput> {
    let (s0, alpha) = initial_state(g, p, params, h_q, question_len)?;
    let mut states = vec![s0];
    let mut betas = Vec::new();
    for _ in 1..params.steps {
        let (s, beta) = step(g, p, params, *states.last().unwrap(), memory, passage_len)?;
        states.push(s);
        betas.push(beta);
    }
    let keep = step_keep_mask(params.steps, mode);
    let (w2, w3) = (p.var(g, params.w2), p.var(g, params.w3));
    let mut kept_steps = Vec::new();
    let (mut step_begin, mut step_end) = (Vec::new(), Vec::new());
    for (t, &s) in states.iter().enumerate() {
        if keep[t] {
            kept_steps.push(t);
            step_begin.push(bilinear_distribution(g, s, w2, memory, passage_len)?);
            step_end.push(bilinear_distribution(g, s, w3, memory, passage_len)?);
        }
    }
    let p_begin = mean(g, &step_begin)?;
    let p_end = mean(g, &step_end)?;
    Ok(SpanOutput {
        states,
        alpha,
        betas,
        kept_steps,
        step_begin,
        step_end,
        p_begin,
        p_end,
    })
}

fn mean(g: &mut Graph, vars: &[Var]) -> Result<Var> {
    let mut total = vars[0];
    for &v in &vars[1..] {
        total = g.add(total, v)?;
    }
    if vars.len() == 1 {
        return Ok(total);
    }
    g.scale(total, 1.0 / vars.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpanPrediction {
    pub p_begin: Vec<f64>,
    pub p_end: Vec<f64>,
    pub begin: usize,
    pub end: usize,
    pub span_score: f64,
    pub is_null: bool,
}

/// Picks the legal pair maximizing `P_begin[i] * P_end[j]`. Legal pairs are
/// `i <= j <= i + max_span_len - 1` with both before the NULL position, plus
/// `(null, null)`. Ties go to the smaller `i`, then the smaller `j`.
pub fn decode_span(p_begin: &[f64], p_end: &[f64], null: usize, max_span_len: usize) -> SpanPrediction {
    assert!(max_span_len >= 1, "max_span_len must be positive");
    assert!(null < p_begin.len() && null < p_end.len(), "NULL index out of range");
    let mut best = (null, null, f64::NEG_INFINITY);
    for i in 0..null {
        let last = (i + max_span_len - 1).min(null - 1);
        for j in i..=last {
            let score = p_begin[i] * p_end[j];
            if score > best.2 {
                best = (i, j, score);
            }
        }
    }
    let null_score = p_begin[null] * p_end[null];
    if null_score > best.2 {
        best = (null, null, null_score);
    }
    SpanPrediction {
        p_begin: p_begin.to_vec(),
        p_end: p_end.to_vec(),
        begin: best.0,
        end: best.1,
        span_score: best.2,
        is_null: best.0 == null,
    }
}
