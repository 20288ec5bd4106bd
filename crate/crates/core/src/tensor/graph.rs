use rand::Rng;

use super::{matmul_at_into, matmul_bt_into, matmul_into, stable_sigmoid, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum UnaryKind {
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
}

/// Operation kinds, used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Scale,
    Affine,
    AddColumn,
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Softmax,
    Concat,
    SliceRows,
    SliceCols,
    Dropout,
    Sum,
    Pick,
    LogClamped,
    Embed,
}

impl OpKind {
    /// Every kind that has a backward rule.
    pub const DIFFERENTIABLE: [OpKind; 22] = [
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Affine,
        OpKind::AddColumn,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Softmax,
        OpKind::Concat,
        OpKind::SliceRows,
        OpKind::SliceCols,
        OpKind::Dropout,
        OpKind::Sum,
        OpKind::Pick,
        OpKind::LogClamped,
        OpKind::Embed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Affine => "affine",
            OpKind::AddColumn => "add_column",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Softmax => "softmax",
            OpKind::Concat => "concat",
            OpKind::SliceRows => "slice_rows",
            OpKind::SliceCols => "slice_cols",
            OpKind::Dropout => "dropout",
            OpKind::Sum => "sum",
            OpKind::Pick => "pick",
            OpKind::LogClamped => "log_clamped",
            OpKind::Embed => "embed",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::DIFFERENTIABLE
            .iter()
            .copied()
            .find(|k| k.name() == name)
    }
}

impl UnaryKind {
    fn kind(self) -> OpKind {
        match self {
            UnaryKind::Relu => OpKind::Relu,
            UnaryKind::Sigmoid => OpKind::Sigmoid,
            UnaryKind::Tanh => OpKind::Tanh,
            UnaryKind::Exp => OpKind::Exp,
            UnaryKind::Log => OpKind::Log,
        }
    }

    fn name(self) -> &'static str {
        self.kind().name()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Affine(Var, f64),
    AddColumn(Var, Var),
    Unary(Var, UnaryKind),
    Softmax(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    SliceRows { input: Var, start: usize },
    SliceCols { input: Var, start: usize },
    Dropout { input: Var, mask: Vec<f64> },
    Sum(Var),
    Pick { input: Var, index: usize },
    LogClamped { input: Var, lo: f64, hi: f64 },
    Embed { table: Var, ids: Vec<usize> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Affine(..) => OpKind::Affine,
            Op::AddColumn(..) => OpKind::AddColumn,
            Op::Unary(_, k) => k.kind(),
            Op::Softmax(_) => OpKind::Softmax,
            Op::Concat { .. } => OpKind::Concat,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Sum(_) => OpKind::Sum,
            Op::Pick { .. } => OpKind::Pick,
            Op::LogClamped { .. } => OpKind::LogClamped,
            Op::Embed { .. } => OpKind::Embed,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A tape of operations in creation (topological) order.
///
/// Values are computed eagerly. [`Graph::backward`] walks the tape once in
/// reverse; a second call is rejected.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
    fault: Option<OpKind>,
}

fn check_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(TensorError::Usage(format!(
            "{op} expects a matrix, got shape {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Makes the backward rule of `kind` deliberately wrong. Only used to
    /// demonstrate that gradient checking catches a broken rule.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Smallest nonzero `|x|` over every ReLU input on the tape. Inputs that
    /// are exactly zero stay zero under any parameter perturbation and are
    /// skipped. Finite differences are only valid when this exceeds the step.
    pub fn relu_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Unary(input, UnaryKind::Relu) => Some(input),
                _ => None,
            })
            .flat_map(|input| self.nodes[input.0].value.data().iter())
            .filter(|x| **x != 0.0)
            .fold(f64::INFINITY, |m, x| m.min(x.abs()))
    }

    /// Records an input. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the backward root with respect to `v`. `None` before
    /// backward or for values that do not take part in differentiation.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        if !self.backward_done || !self.rg(v) {
            return None;
        }
        let shape = self.nodes[v.0].value.shape().to_vec();
        Some(match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (r, k) = check_2d("matmul", av)?;
        let (k2, c) = check_2d("matmul", bv)?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; r * c];
        matmul_into(av.data(), bv.data(), &mut out, r, k, c);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        check_2d("transpose", self.value(a))?;
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(op, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * factor).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Scale(a, factor), rg))
    }

    /// `factor * a + offset`, elementwise.
    pub fn affine(&mut self, a: Var, factor: f64, offset: f64) -> Result<Var> {
        let av = self.value(a);
        let data = av.data().iter().map(|x| factor * x + offset).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Affine(a, factor), rg))
    }

    /// Adds an `r x 1` column to every column of an `r x c` matrix.
    pub fn add_column(&mut self, a: Var, col: Var) -> Result<Var> {
        let (av, cv) = (self.value(a), self.value(col));
        let (r, c) = check_2d("add_column", av)?;
        if cv.shape() != [r, 1] {
            return Err(TensorError::Shape {
                op: "add_column",
                lhs: av.shape().to_vec(),
                rhs: cv.shape().to_vec(),
            });
        }
        let mut data = av.data().to_vec();
        for i in 0..r {
            let b = cv.data()[i];
            for x in &mut data[i * c..(i + 1) * c] {
                *x += b;
            }
        }
        let out = Tensor::new(vec![r, c], data)?;
        let rg = self.rg(a) || self.rg(col);
        Ok(self.push(out, Op::AddColumn(a, col), rg))
    }

    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.data().iter().any(|x| x.is_nan()) {
            return Err(TensorError::Numeric {
                op: kind.name(),
                detail: "NaN input".into(),
            });
        }
        let data: Vec<f64> = match kind {
            UnaryKind::Relu => av.data().iter().map(|&x| x.max(0.0)).collect(),
            UnaryKind::Sigmoid => av.data().iter().map(|&x| stable_sigmoid(x)).collect(),
            UnaryKind::Tanh => av.data().iter().map(|x| x.tanh()).collect(),
            UnaryKind::Exp => av.data().iter().map(|x| x.exp()).collect(),
            UnaryKind::Log => {
                if let Some(bad) = av.data().iter().find(|&&x| x <= 0.0) {
                    return Err(TensorError::Numeric {
                        op: "log",
                        detail: format!("non-positive input {bad}"),
                    });
                }
                av.data().iter().map(|x| x.ln()).collect()
            }
        };
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Unary(a, kind), rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Tanh, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, a)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, None)
    }

    /// Row-wise softmax over the entries where `keep` is true. Dropped entries
    /// receive exactly zero probability; a row with no kept entry is all zeros.
    pub fn masked_softmax_rows(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        if keep.len() != self.value(a).len() {
            return Err(TensorError::Shape {
                op: "softmax",
                lhs: self.value(a).shape().to_vec(),
                rhs: vec![keep.len()],
            });
        }
        self.softmax_impl(a, Some(keep))
    }

    fn softmax_impl(&mut self, a: Var, keep: Option<&[bool]>) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = check_2d("softmax", av)?;
        let kept = |idx: usize| keep.is_none_or(|k| k[idx]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &av.data()[i * c..(i + 1) * c];
            let mut max = f64::NEG_INFINITY;
            for (j, &x) in row.iter().enumerate() {
                if kept(i * c + j) {
                    if x.is_nan() {
                        return Err(TensorError::Numeric {
                            op: "softmax",
                            detail: "NaN input".into(),
                        });
                    }
                    max = max.max(x);
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for (j, &x) in row.iter().enumerate() {
                if kept(i * c + j) {
                    let e = (x - max).exp();
                    out[i * c + j] = e;
                    total += e;
                }
            }
            for v in &mut out[i * c..(i + 1) * c] {
                *v /= total;
            }
        }
        let out = Tensor::new(vec![r, c], out)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| TensorError::Usage("concat of zero tensors".into()))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::Usage(format!(
                "concat axis {axis} out of range for shape {base:?}"
            )));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = check_2d("slice_rows", av)?;
        if len == 0 || start + len > r {
            return Err(TensorError::Usage(format!(
                "row slice {start}..{} out of range for {r} rows",
                start + len
            )));
        }
        let data = av.data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::new(vec![len, c], data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceRows { input: a, start }, rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = check_2d("slice_cols", av)?;
        if len == 0 || start + len > c {
            return Err(TensorError::Usage(format!(
                "column slice {start}..{} out of range for {c} columns",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&av.data()[i * c + start..i * c + start + len]);
        }
        let out = Tensor::new(vec![r, len], data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceCols { input: a, start }, rg))
    }

    /// Inverted dropout. Outside training, or at rate zero, returns `a`
    /// unchanged without drawing from `rng`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Config(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep_scale })
            .collect();
        let av = self.value(a);
        let data = av.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Dropout { input: a, mask }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).sum();
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(total), Op::Sum(a), rg))
    }

    /// Selects one entry (row-major flat index) as a `1 x 1` value.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let av = self.value(a);
        if index >= av.len() {
            return Err(TensorError::Usage(format!(
                "pick index {index} out of range for shape {:?}",
                av.shape()
            )));
        }
        let v = av.data()[index];
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(v), Op::Pick { input: a, index }, rg))
    }

    /// `ln(clamp(a, lo, hi))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo > 0.0 && lo < hi) {
            return Err(TensorError::Usage(format!("invalid clamp range [{lo}, {hi}]")));
        }
        let av = self.value(a);
        if av.data().iter().any(|x| x.is_nan()) {
            return Err(TensorError::Numeric {
                op: "log_clamped",
                detail: "NaN input".into(),
            });
        }
        let data = av.data().iter().map(|x| x.clamp(lo, hi).ln()).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::LogClamped { input: a, lo, hi }, rg))
    }

    /// Looks up rows of a `vocab x dim` table, returning a `dim x ids.len()`
    /// matrix with one column per id.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = embed_lookup(self.value(table), ids)?;
        let rg = self.rg(table);
        Ok(self.push(
            out,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse-mode pass from a single-element root.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::Usage(
                "backward already ran on this graph".into(),
            ));
        }
        if self.value(root).len() != 1 {
            return Err(TensorError::Usage(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.rg(root) {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(mut g) = self.grads[i].take() else {
                continue;
            };
            if self.fault == Some(self.nodes[i].op.kind()) {
                g.iter_mut().for_each(|x| *x *= 1.5);
            }
            Backprop {
                nodes: &self.nodes,
                grads: &mut self.grads,
            }
            .propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }
}

struct Backprop<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl Backprop<'_> {
    fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&mut self, v: Var, contribution: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        contribution(slot);
    }

    fn add_into(&mut self, v: Var, g: &[f64]) {
        self.accumulate(v, |acc| {
            for (a, x) in acc.iter_mut().zip(g) {
                *a += x;
            }
        });
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let nodes = self.nodes;
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (r, k) = (self.value(a).shape()[0], self.value(a).shape()[1]);
                let c = self.value(b).shape()[1];
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                self.accumulate(a, |acc| matmul_bt_into(g, bv, acc, r, k, c));
                self.accumulate(b, |acc| matmul_at_into(av, g, acc, r, k, c));
            }
            &Op::Transpose(a) => {
                let (r, c) = (self.value(a).shape()[0], self.value(a).shape()[1]);
                let gt = Tensor::new(vec![c, r], g.to_vec()).expect("shape").transpose();
                self.add_into(a, gt.data());
            }
            &Op::Add(a, b) => {
                self.add_into(a, g);
                self.add_into(b, g);
            }
            &Op::Sub(a, b) => {
                self.add_into(a, g);
                self.accumulate(b, |acc| {
                    for (x, y) in acc.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            &Op::Mul(a, b) => {
                if self.rg(a) {
                    let d: Vec<f64> = g.iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
                    self.add_into(a, &d);
                }
                if self.rg(b) {
                    let d: Vec<f64> = g.iter().zip(self.value(a).data()).map(|(x, y)| x * y).collect();
                    self.add_into(b, &d);
                }
            }
            &Op::Scale(a, f) | &Op::Affine(a, f) => {
                let d: Vec<f64> = g.iter().map(|x| x * f).collect();
                self.add_into(a, &d);
            }
            &Op::AddColumn(a, col) => {
                self.add_into(a, g);
                if self.rg(col) {
                    let (r, c) = (self.value(a).shape()[0], self.value(a).shape()[1]);
                    let d: Vec<f64> = (0..r).map(|ii| g[ii * c..(ii + 1) * c].iter().sum()).collect();
                    self.add_into(col, &d);
                }
            }
            &Op::Unary(a, kind) => {
                let x = self.value(a).data();
                let y = node.value.data();
                let d: Vec<f64> = match kind {
                    UnaryKind::Relu => g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
                    UnaryKind::Sigmoid => g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
                    UnaryKind::Tanh => g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect(),
                    UnaryKind::Exp => g.iter().zip(y).map(|(g, y)| g * y).collect(),
                    UnaryKind::Log => g.iter().zip(x).map(|(g, x)| g / x).collect(),
                };
                self.add_into(a, &d);
            }
            &Op::Softmax(a) => {
                let y = node.value.data();
                let c = node.value.shape()[1];
                let mut d = vec![0.0; y.len()];
                for (row, (yr, gr)) in y.chunks(c).zip(g.chunks(c)).enumerate() {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[row * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.add_into(a, &d);
            }
            Op::Concat { inputs, axis } => {
                let inputs = inputs.clone();
                let axis = *axis;
                let shape = node.value.shape().to_vec();
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let chunk = self.value(v).shape()[axis] * inner;
                    if self.rg(v) {
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            d.extend_from_slice(&g[o * row + offset..o * row + offset + chunk]);
                        }
                        self.add_into(v, &d);
                    }
                    offset += chunk;
                }
            }
            &Op::SliceRows { input, start } => {
                let c = node.value.shape()[1];
                self.accumulate(input, |acc| {
                    for (a, x) in acc[start * c..start * c + g.len()].iter_mut().zip(g) {
                        *a += x;
                    }
                });
            }
            &Op::SliceCols { input, start } => {
                let (r, len) = (node.value.shape()[0], node.value.shape()[1]);
                let c = self.value(input).shape()[1];
                self.accumulate(input, |acc| {
                    for ii in 0..r {
                        for j in 0..len {
                            acc[ii * c + start + j] += g[ii * len + j];
                        }
                    }
                });
            }
            Op::Dropout { input, mask } => {
                let d: Vec<f64> = g.iter().zip(mask).map(|(x, m)| x * m).collect();
                let input = *input;
                self.add_into(input, &d);
            }
            &Op::Sum(a) => {
                let n = self.value(a).len();
                self.add_into(a, &vec![g[0]; n]);
            }
            &Op::Pick { input, index } => {
                self.accumulate(input, |acc| acc[index] += g[0]);
            }
            &Op::LogClamped { input, lo, hi } => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(self.value(input).data())
                    .map(|(g, &x)| if (lo..=hi).contains(&x) { g / x } else { 0.0 })
                    .collect();
                self.add_into(input, &d);
            }
            Op::Embed { table, ids } => {
                let table = *table;
                let ids = ids.clone();
                let dim = self.value(table).shape()[1];
                let n = ids.len();
                self.accumulate(table, |acc| {
                    for (col, &id) in ids.iter().enumerate() {
                        for k in 0..dim {
                            acc[id * dim + k] += g[k * n + col];
                        }
                    }
                });
            }
        }
    }
}

/// Gathers table rows into columns; shared by the graph op and by callers that
/// look up frozen tables without recording them.
pub fn embed_lookup(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let (vocab, dim) = check_2d("embed", table)?;
    if ids.is_empty() {
        return Err(TensorError::Usage("embedding lookup of zero ids".into()));
    }
    if let Some(bad) = ids.iter().find(|&&id| id >= vocab) {
        return Err(TensorError::Usage(format!(
            "embedding id {bad} outside table of {vocab} rows"
        )));
    }
    let n = ids.len();
    let mut data = vec![0.0; dim * n];
    for (col, &id) in ids.iter().enumerate() {
        for k in 0..dim {
            data[k * n + col] = table.data()[id * dim + k];
        }
    }
    Tensor::new(vec![dim, n], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], away_from_zero: bool) -> Tensor {
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
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    /// Builds `sum(weights * f(inputs))`, so upstream gradients are not all ones.
    fn weighted_loss(
        inputs: &[Tensor],
        weights_seed: u64,
        f: &dyn Fn(&mut Graph, &[Var]) -> Var,
    ) -> (Graph, Var, Vec<Var>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars);
        let mut rng = ChaCha8Rng::seed_from_u64(weights_seed);
        let w = rand_tensor(&mut rng, g.shape(out), false);
        let w = g.constant(w);
        let prod = g.mul(out, w).unwrap();
        let loss = g.sum(prod).unwrap();
        (g, loss, vars)
    }

    /// Central finite differences, eps = 1e-3, compared coordinate by coordinate.
    fn assert_grads_match(inputs: Vec<Tensor>, f: &dyn Fn(&mut Graph, &[Var]) -> Var) {
        let (mut g, loss, vars) = weighted_loss(&inputs, 99, f);
        g.backward(loss).unwrap();
        let eps = 1e-3;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = g.grad(vars[k]).unwrap();
            for i in 0..input.len() {
                let eval = |delta: f64| {
                    let mut shifted = inputs.clone();
                    shifted[k].data_mut()[i] += delta;
                    let (g, loss, _) = weighted_loss(&shifted, 99, f);
                    g.value(loss).item()
                };
                let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let a = analytic.data()[i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                assert!(
                    rel < 1e-4 || (a - numeric).abs() < 1e-10,
                    "input {k} coord {i}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::identity(2));
        let m = g.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let out = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(out), g.value(m));

        let p = g.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]));
        let v = g.constant(Tensor::from_rows(&[&[5.0], &[7.0]]));
        let out = g.matmul(p, v).unwrap();
        assert_eq!(g.value(out).data(), &[5.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::Shape {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn matmul_sum_gradient_is_broadcast_row_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, &[3, 4], false);
        let b = rand_tensor(&mut rng, &[4, 2], false);
        let mut g = Graph::new();
        let av = g.param(a.clone());
        let bv = g.constant(b.clone());
        let prod = g.matmul(av, bv).unwrap();
        let loss = g.sum(prod).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(av).unwrap();
        for i in 0..3 {
            for p in 0..4 {
                let row_sum: f64 = b.row(p).iter().sum();
                assert!((grad.get(i, p) - row_sum).abs() < 1e-12);
            }
        }
        assert_grads_match(vec![a, b], &|g, v| g.matmul(v[0], v[1]).unwrap());
    }

    #[test]
    fn softmax_closed_forms() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[&[0.0, 0.0], &[2f64.ln(), 0.0], &[1000.0, 0.0]]));
        let y = g.softmax_rows(x).unwrap();
        let y = g.value(y);
        assert_eq!(y.row(0), &[0.5, 0.5]);
        assert!((y.get(1, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((y.get(1, 1) - 1.0 / 3.0).abs() < 1e-15);
        // exp(-1000) underflows to zero in double precision.
        assert_eq!(y.row(2), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[&[f64::NAN, 0.0]]));
        assert!(matches!(g.softmax_rows(x), Err(TensorError::Numeric { .. })));
    }

    #[test]
    fn masked_softmax_gives_zero_mass_and_empty_rows() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]));
        let keep = [true, false, true, false, false, false];
        let y = g.masked_softmax_rows(x, &keep).unwrap();
        let yv = g.value(y).clone();
        assert_eq!(yv.get(0, 1), 0.0);
        assert!((yv.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(yv.row(1), &[0.0, 0.0, 0.0]);
        let w = g.constant(Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0]]));
        let p = g.mul(y, w).unwrap();
        let l = g.sum(p).unwrap();
        g.backward(l).unwrap();
        let gx = g.grad(x).unwrap();
        assert_eq!(gx.get(0, 1), 0.0);
        assert_eq!(gx.row(1), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn elementwise_definitions() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[&[-3.0, 0.0, 3.0]]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 3.0]);
        let s = g.sigmoid(x).unwrap();
        assert_eq!(g.value(s).data()[1], 0.5);
        assert!(matches!(g.log(x), Err(TensorError::Numeric { op: "log", .. })));
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(0.0));
        let s = g.sigmoid(x).unwrap();
        g.backward(s).unwrap();
        let analytic = g.grad(x).unwrap().item();
        let eps = 1e-3;
        let numeric = (stable_sigmoid(eps) - stable_sigmoid(-eps)) / (2.0 * eps);
        assert_eq!(analytic, 0.25);
        assert!((analytic - numeric).abs() < 1e-7);
    }

    #[test]
    fn concat_shapes_and_routing() {
        let mut g = Graph::new();
        let a = g.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let b = g.param(Tensor::new(vec![1], vec![3.0]).unwrap());
        let c = g.concat(&[a, b], 0).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0]);
        let s = g.sum(c).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(g.grad(b).unwrap().data(), &[1.0]);

        let mut g = Graph::new();
        let d = 3;
        let x = g.constant(Tensor::zeros(&[4 * d, 5]));
        let y = g.constant(Tensor::zeros(&[4 * d, 5]));
        let c = g.concat(&[x, y], 0).unwrap();
        assert_eq!(g.shape(c), &[8 * d, 5]);

        let z = g.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(g.concat(&[x, z], 0), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(&[4, 4], 2.0));
        assert_eq!(g.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(g.dropout(x, 0.5, false, &mut rng).unwrap(), x);
        assert!(matches!(
            g.dropout(x, 1.0, true, &mut rng),
            Err(TensorError::Config(_))
        ));

        let big = g.constant(Tensor::filled(&[100, 1000], 1.0));
        let run = |seed: u64, g: &mut Graph| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = g.dropout(big, 0.1, true, &mut rng).unwrap();
            g.value(d).clone()
        };
        let first = run(11, &mut g);
        let second = run(11, &mut g);
        assert_eq!(first, second);

        let n = first.len() as f64;
        let zeros = first.data().iter().filter(|&&v| v == 0.0).count() as f64;
        let sigma = (n * 0.1 * 0.9).sqrt();
        assert!((zeros - 0.1 * n).abs() < 3.0 * sigma, "zeros {zeros}");
        // inverted scaling keeps the mean
        let mean = first.sum() / n;
        let mean_sigma = (0.1 / 0.9 / n).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * mean_sigma, "mean {mean}");
    }

    #[test]
    fn backward_contract() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let lonely = g.param(Tensor::zeros(&[2, 2]));
        let sq = g.mul(x, x).unwrap();
        g.backward(sq).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);
        assert_eq!(g.grad(lonely).unwrap(), Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(sq), Err(TensorError::Usage(_))));

        let mut g = Graph::new();
        let v = g.param(Tensor::zeros(&[1, 2]));
        assert!(matches!(g.backward(v), Err(TensorError::Usage(_))));
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_tensor(&mut rng, &[3, 4], true);
        let b = rand_tensor(&mut rng, &[3, 4], true);
        let col = rand_tensor(&mut rng, &[3, 1], true);
        let pos = Tensor::new(vec![3, 4], a.data().iter().map(|x| x.abs() + 0.5).collect()).unwrap();
        let table = rand_tensor(&mut rng, &[5, 3], false);

        assert_grads_match(vec![a.clone()], &|g, v| g.transpose(v[0]).unwrap());
        assert_grads_match(vec![a.clone(), b.clone()], &|g, v| g.add(v[0], v[1]).unwrap());
        assert_grads_match(vec![a.clone(), b.clone()], &|g, v| g.sub(v[0], v[1]).unwrap());
        assert_grads_match(vec![a.clone(), b.clone()], &|g, v| g.mul(v[0], v[1]).unwrap());
        assert_grads_match(vec![a.clone()], &|g, v| g.scale(v[0], -1.7).unwrap());
        assert_grads_match(vec![a.clone()], &|g, v| g.affine(v[0], 0.3, 2.0).unwrap());
        assert_grads_match(vec![a.clone(), col], &|g, v| g.add_column(v[0], v[1]).unwrap());
        for kind in [UnaryKind::Relu, UnaryKind::Sigmoid, UnaryKind::Tanh, UnaryKind::Exp] {
            assert_grads_match(vec![a.clone()], &|g, v| g.unary(kind, v[0]).unwrap());
        }
        assert_grads_match(vec![pos.clone()], &|g, v| g.log(v[0]).unwrap());
        assert_grads_match(vec![pos.clone()], &|g, v| g.log_clamped(v[0], 1e-12, 1.0 - 1e-12).unwrap());
        assert_grads_match(vec![a.clone()], &|g, v| g.softmax_rows(v[0]).unwrap());
        let keep: Vec<bool> = (0..12).map(|i| i % 3 != 1).collect();
        assert_grads_match(vec![a.clone()], &|g, v| g.masked_softmax_rows(v[0], &keep).unwrap());
        assert_grads_match(vec![a.clone(), b.clone()], &|g, v| g.concat(&[v[0], v[1]], 0).unwrap());
        assert_grads_match(vec![a.clone(), b.clone()], &|g, v| g.concat(&[v[0], v[1]], 1).unwrap());
        assert_grads_match(vec![a.clone()], &|g, v| g.slice_rows(v[0], 1, 2).unwrap());
        assert_grads_match(vec![a.clone()], &|g, v| g.slice_cols(v[0], 1, 3).unwrap());
        assert_grads_match(vec![a.clone()], &|g, v| g.sum(v[0]).unwrap());
        assert_grads_match(vec![a.clone()], &|g, v| g.pick(v[0], 7).unwrap());
        assert_grads_match(vec![table], &|g, v| g.embed(v[0], &[4, 0, 4, 2]).unwrap());
        assert_grads_match(vec![a.clone()], &|g, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            g.dropout(v[0], 0.3, true, &mut rng).unwrap()
        });
    }

    #[test]
    fn injected_fault_corrupts_only_that_rule() {
        let mut g = Graph::new();
        g.inject_fault(OpKind::Tanh);
        let x = g.param(Tensor::scalar(0.0));
        let t = g.tanh(x).unwrap();
        g.backward(t).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 1.5);
    }
}
