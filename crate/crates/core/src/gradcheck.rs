//! Finite-difference verification of every backward rule and of every
//! parameter group of a small model.

use std::time::Instant;

use rand::Rng;

use crate::data::{extend_vocabularies, featurize, parse_dataset, ContextualVectors, DefaultTagger, FeaturizedExample, Vocabularies};
use crate::error::{Error, Result};
use crate::loss::batch_loss;
use crate::model::{Mode, ModelConfig, SanModel};
use crate::params::Bound;
use crate::rng::{seeded, SanRng};
use crate::tensor::{Graph, OpKind, Tensor, UnaryKind, Var};

pub const EPSILON: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;

/// Outcome of one compared gradient (an op input or a parameter group).
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub scalars: usize,
    /// `|a - n| / max(|a|, |n|)` over the whole gradient, with Euclidean norms.
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckReport {
    pub ops: Vec<CheckResult>,
    pub groups: Vec<CheckResult>,
    pub seconds: f64,
    /// Seed of the toy model actually checked.
    pub toy_seed: u64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().chain(&self.groups).all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.ops.iter().chain(&self.groups).filter(|c| !c.passed).collect()
    }

    pub fn worst_group_error(&self) -> f64 {
        self.groups.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }
}

fn compare(name: String, analytic: &[f64], numeric: &[f64], tolerance: f64) -> CheckResult {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    let rel_error = if scale == 0.0 { 0.0 } else { diff / scale };
    let max_abs_error = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    CheckResult {
        name,
        scalars: analytic.len(),
        passed: rel_error < tolerance && rel_error.is_finite(),
        rel_error,
        max_abs_error,
    }
}

/// Central difference of `f` with respect to every coordinate of `x`.
fn numeric_gradient(x: &mut [f64], eps: f64, mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let plus = f(x)?;
        x[i] = orig - eps;
        let minus = f(x)?;
        x[i] = orig;
        out.push((plus - minus) / (2.0 * eps));
    }
    Ok(out)
}

type OpBuilder = Box<dyn Fn(&mut Graph, &[Var]) -> crate::tensor::Result<Var>>;

fn random_tensor(rng: &mut SanRng, shape: &[usize], away_from_zero: bool) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(-1.0..1.0);
            if away_from_zero {
                v.signum() * (0.2 + v.abs())
            } else {
                v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("non-empty shape")
}

/// One small case per differentiable op: inputs and the op applied to them.
fn op_cases(rng: &mut SanRng) -> Vec<(OpKind, Vec<Tensor>, OpBuilder)> {
    let a = random_tensor(rng, &[3, 4], true);
    let b = random_tensor(rng, &[3, 4], true);
    let bt = random_tensor(rng, &[4, 2], true);
    let col = random_tensor(rng, &[3, 1], true);
    let pos = Tensor::new(vec![3, 4], a.data().iter().map(|x| x.abs() + 0.5).collect()).expect("shape");
    let table = random_tensor(rng, &[5, 3], false);
    let keep: Vec<bool> = (0..12).map(|i| i % 3 != 1).collect();
    let unary = |kind: UnaryKind| -> OpBuilder { Box::new(move |g, v| g.unary(kind, v[0])) };
    vec![
        (OpKind::MatMul, vec![a.clone(), bt], Box::new(|g, v| g.matmul(v[0], v[1]))),
        (OpKind::Transpose, vec![a.clone()], Box::new(|g, v| g.transpose(v[0]))),
        (OpKind::Add, vec![a.clone(), b.clone()], Box::new(|g, v| g.add(v[0], v[1]))),
        (OpKind::Sub, vec![a.clone(), b.clone()], Box::new(|g, v| g.sub(v[0], v[1]))),
        (OpKind::Mul, vec![a.clone(), b.clone()], Box::new(|g, v| g.mul(v[0], v[1]))),
        (OpKind::Scale, vec![a.clone()], Box::new(|g, v| g.scale(v[0], -1.7))),
        (OpKind::Affine, vec![a.clone()], Box::new(|g, v| g.affine(v[0], 0.3, 2.0))),
        (OpKind::AddColumn, vec![a.clone(), col], Box::new(|g, v| g.add_column(v[0], v[1]))),
        (OpKind::Relu, vec![a.clone()], unary(UnaryKind::Relu)),
        (OpKind::Sigmoid, vec![a.clone()], unary(UnaryKind::Sigmoid)),
        (OpKind::Tanh, vec![a.clone()], unary(UnaryKind::Tanh)),
        (OpKind::Exp, vec![a.clone()], unary(UnaryKind::Exp)),
        (OpKind::Log, vec![pos.clone()], unary(UnaryKind::Log)),
        (OpKind::Softmax, vec![a.clone()], Box::new(move |g, v| g.masked_softmax_rows(v[0], &keep))),
        (OpKind::Concat, vec![a.clone(), b.clone()], Box::new(|g, v| g.concat(&[v[0], v[1]], 1))),
        (OpKind::SliceRows, vec![a.clone()], Box::new(|g, v| g.slice_rows(v[0], 1, 2))),
        (OpKind::SliceCols, vec![a.clone()], Box::new(|g, v| g.slice_cols(v[0], 1, 3))),
        (
            OpKind::Dropout,
            vec![a.clone()],
            Box::new(|g, v| g.dropout(v[0], 0.3, true, &mut seeded(8))),
        ),
        (OpKind::Sum, vec![a.clone()], Box::new(|g, v| g.sum(v[0]))),
        (OpKind::Pick, vec![a], Box::new(|g, v| g.pick(v[0], 7))),
        (OpKind::LogClamped, vec![pos], Box::new(|g, v| g.log_clamped(v[0], 1e-12, 1.0))),
        (OpKind::Embed, vec![table], Box::new(|g, v| g.embed(v[0], &[4, 0, 4, 2]))),
    ]
}

/// `sum(w * op(inputs))` with fixed random `w`, so upstream gradients vary.
fn weighted_op_loss(
    inputs: &[Tensor],
    op: &OpBuilder,
    weights: &mut Option<Tensor>,
    fault: Option<OpKind>,
) -> Result<(Graph, Var, Vec<Var>)> {
    let mut g = Graph::new();
    if let Some(kind) = fault {
        g.inject_fault(kind);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = op(&mut g, &vars)?;
    let w = weights.get_or_insert_with(|| random_tensor(&mut seeded(99), g.shape(out), false));
    let w = g.constant(w.clone());
    let prod = g.mul(out, w)?;
    let loss = g.sum(prod)?;
    Ok((g, loss, vars))
}

/// Checks the backward rule of every differentiable op against central
/// differences. With `fault`, that op's rule is deliberately corrupted.
pub fn check_ops(fault: Option<OpKind>) -> Result<Vec<CheckResult>> {
    let mut rng = seeded(5);
    let mut out = Vec::new();
    for (kind, inputs, op) in op_cases(&mut rng) {
        let mut weights = None;
        let (mut g, loss, vars) = weighted_op_loss(&inputs, &op, &mut weights, fault)?;
        g.backward(loss)?;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = g.grad(vars[k]).expect("gradient after backward");
            let mut x = input.data().to_vec();
            let numeric = numeric_gradient(&mut x, EPSILON, |x| {
                let mut shifted = inputs.clone();
                shifted[k].data_mut().copy_from_slice(x);
                let (g, loss, _) = weighted_op_loss(&shifted, &op, &mut weights, None)?;
                Ok(g.value(loss).item())
            })?;
            out.push(compare(format!("op {} input {k}", kind.name()), analytic.data(), &numeric, TOLERANCE));
        }
    }
    Ok(out)
}

/// The small model and two examples (one answerable) used for the
/// parameter-group check: hidden size 4, 3 question tokens, 4 passage
/// tokens plus the sentinel, 3 reasoning steps.
pub struct Toy {
    pub model: SanModel,
    pub features: Vec<FeaturizedExample>,
    pub contextual: Vec<ContextualVectors>,
    pub vocabularies: Vocabularies,
}

pub const TOY_DATA: &str = r#"{"data": [{"paragraphs": [{
    "context": "Kelso sells blue kites",
    "qas": [
        {"id": "toy-a", "question": "Kelso sells what", "answers": [{"text": "blue kites", "answer_start": 12}]},
        {"id": "toy-u", "question": "who buys boats", "answers": [], "is_impossible": true}
    ]}]}]}"#;

pub const TOY_EMBEDDING_DIM: usize = 5;
pub const TOY_CONTEXTUAL_DIM: usize = 3;

fn toy_candidate(seed: u64) -> Result<Toy> {
    let examples = parse_dataset(TOY_DATA)?.examples;
    let mut vocabularies = Vocabularies::default();
    extend_vocabularies(&mut vocabularies, &examples, &DefaultTagger);
    let features: Vec<FeaturizedExample> = examples.iter().map(|e| featurize(e, &vocabularies, &DefaultTagger)).collect();
    let config = ModelConfig {
        word_vocab_size: vocabularies.words.len(),
        embedding_dim: TOY_EMBEDDING_DIM,
        pos_vocab_size: vocabularies.pos.len(),
        ner_vocab_size: vocabularies.ner.len(),
        pos_dim: 2,
        ner_dim: 2,
        hidden_size: 4,
        contextual_dim: Some(TOY_CONTEXTUAL_DIM),
        steps: 3,
        max_span_len: 15,
        tune_embeddings: true,
    };
    let mut rng = seeded(seed);
    let embeddings = random_tensor(&mut rng, &[config.word_vocab_size, config.embedding_dim], false);
    let mut model = SanModel::new(config, embeddings, &mut rng)?;
    // Larger weights than the default initialization, so that every
    // nonlinearity is exercised away from its linear regime.
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        for v in model.params.get_mut(id).data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    let contextual = features
        .iter()
        .map(|f| ContextualVectors {
            question: random_tensor(&mut rng, &[TOY_CONTEXTUAL_DIM, f.question_len], false),
            passage: random_tensor(&mut rng, &[TOY_CONTEXTUAL_DIM, f.passage_len - 1], false),
        })
        .collect();
    Ok(Toy {
        model,
        features,
        contextual,
        vocabularies,
    })
}

/// Every ReLU input of a usable toy lies at least this far from the kink,
/// so no central difference straddles it.
pub const KINK_MARGIN: f64 = 3.0 * EPSILON;
const MAX_SEED_SEARCH: u64 = 10_000;

/// The first toy at or after `seed` whose training graph keeps every ReLU
/// input clear of the kink. Returns the toy and the seed that produced it;
/// the random stream of its loss is seeded with that seed plus one.
pub fn toy(seed: u64) -> Result<(Toy, u64)> {
    for s in seed..seed.saturating_add(MAX_SEED_SEARCH) {
        let candidate = toy_candidate(s)?;
        let mut g = Graph::new();
        toy_loss(&candidate, s.wrapping_add(1), &mut g)?;
        if g.relu_margin() >= KINK_MARGIN {
            return Ok((candidate, s));
        }
    }
    Err(Error::CheckFailed(format!("no kink-free toy model within {MAX_SEED_SEARCH} seeds of {seed}")))
}

pub const TOY_DROPOUT: f64 = 0.1;
pub const TOY_STEP_DROPOUT: f64 = 0.4;

/// Joint training loss of the toy batch. The random stream is reseeded on
/// every call, so dropout masks and dropped steps are identical across the
/// perturbed evaluations.
pub fn toy_loss(toy: &Toy, stream_seed: u64, g: &mut Graph) -> Result<(Var, crate::params::Binding)> {
    let binding = toy.model.params.bind(g);
    let p = Bound::new(&toy.model.params, &binding);
    let mut rng = seeded(stream_seed);
    let mut mode = Mode::train(TOY_DROPOUT, TOY_STEP_DROPOUT, &mut rng);
    let batch: Vec<_> = toy.features.iter().zip(&toy.contextual).map(|(f, c)| (f, Some(c))).collect();
    let loss = batch_loss(g, &toy.model, p, &batch, 1.0, &mut mode)?;
    Ok((loss.joint, binding))
}

/// Compares the analytic gradient of every trainable parameter group of the
/// toy model with central differences.
pub fn check_groups(toy: &mut Toy, stream_seed: u64, fault: Option<OpKind>) -> Result<Vec<CheckResult>> {
    let mut g = Graph::new();
    if let Some(kind) = fault {
        g.inject_fault(kind);
    }
    let (loss, binding) = toy_loss(toy, stream_seed, &mut g)?;

    g.backward(loss)?;
    let ids: Vec<_> = toy.model.params.ids().collect();
    let mut out = Vec::new();
    for id in ids {
        let Some(var) = binding.get(id) else { continue };
        let analytic = g.grad(var).expect("gradient after backward");
        let name = toy.model.params.entry(id).name.clone();
        let mut x = toy.model.params.get(id).data().to_vec();
        let numeric = numeric_gradient(&mut x, EPSILON, |x| {
            toy.model.params.get_mut(id).data_mut().copy_from_slice(x);
            let mut g = Graph::new();
            let (loss, _) = toy_loss(toy, stream_seed, &mut g)?;
            Ok(g.value(loss).item())
        })?;
        toy.model.params.get_mut(id).data_mut().copy_from_slice(&x);
        out.push(compare(name, analytic.data(), &numeric, TOLERANCE));
    }
    Ok(out)
}

/// Full check: every op rule, then every parameter group of the toy model.
pub fn run(seed: u64, fault: Option<OpKind>) -> Result<GradcheckReport> {
    let start = Instant::now();
    let ops = check_ops(fault)?;
    let (mut toy, used) = toy(seed)?;
    let groups = check_groups(&mut toy, used.wrapping_add(1), fault)?;
    Ok(GradcheckReport {
        ops,
        groups,
        seconds: start.elapsed().as_secs_f64(),
        toy_seed: used,
    })
}

/// Parses an op name for fault injection.
pub fn parse_fault(name: &str) -> Result<OpKind> {
    OpKind::from_name(name).ok_or_else(|| {
        let known: Vec<_> = OpKind::DIFFERENTIABLE.iter().map(|k| k.name()).collect();
        Error::Config(format!("unknown op {name:?}; expected one of {}", known.join(", ")))
    })
}
