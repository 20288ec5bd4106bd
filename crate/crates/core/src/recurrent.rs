//! LSTM and bidirectional LSTM layers built from graph operations.

use rand::Rng;

use crate::params::{Bound, ParamId, ParamSet};
use crate::tensor::{Graph, Result, Tensor, Var};

/// One LSTM direction. Gate rows are laid out as input, forget, cell, output.
#[derive(Clone, Debug)]
pub struct LstmParams {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmParams {
    /// Weights uniform in +-1/sqrt(hidden); forget-gate bias starts at 1.
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, prefix: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_input = params.add_uniform(&format!("{prefix}.w_input"), &[4 * hidden, input], bound, rng);
        let w_hidden = params.add_uniform(&format!("{prefix}.w_hidden"), &[4 * hidden, hidden], bound, rng);
        let bias = params.add_uniform(&format!("{prefix}.bias"), &[4 * hidden, 1], bound, rng);
        for v in &mut params.get_mut(bias).data_mut()[hidden..2 * hidden] {
            *v += 1.0;
        }
        LstmParams {
            w_input,
            w_hidden,
            bias,
            hidden,
        }
    }

    /// Runs over the columns of `x` in `order`, starting from zero state.
    /// Returns the hidden column produced at each visited position, in visit
    /// order.
    fn run(&self, g: &mut Graph, p: Bound, x: Var, order: impl Iterator<Item = usize>) -> Result<Vec<Var>> {
        let h = self.hidden;
        let w_in = p.var(g, self.w_input);
        let w_hid = p.var(g, self.w_hidden);
        let bias = p.var(g, self.bias);
        let projected = g.matmul(w_in, x)?;
        let pre = g.add_column(projected, bias)?;

        let mut state: Option<(Var, Var)> = None;
        let mut outputs = Vec::new();
        for t in order {
            let col = g.slice_cols(pre, t, 1)?;
            let gates = match state {
                Some((h_prev, _)) => {
                    let rec = g.matmul(w_hid, h_prev)?;
                    g.add(col, rec)?
                }
                None => col,
            };
            let in_forget = g.slice_rows(gates, 0, 2 * h)?;
            let in_forget = g.sigmoid(in_forget)?;
            let input_gate = g.slice_rows(in_forget, 0, h)?;
            let cell_in = g.slice_rows(gates, 2 * h, h)?;
            let cell_in = g.tanh(cell_in)?;
            let out_gate = g.slice_rows(gates, 3 * h, h)?;
            let out_gate = g.sigmoid(out_gate)?;
            let written = g.mul(input_gate, cell_in)?;
            let cell = match state {
                Some((_, c_prev)) => {
                    let forget_gate = g.slice_rows(in_forget, h, h)?;
                    let kept = g.mul(forget_gate, c_prev)?;
                    g.add(kept, written)?
                }
                None => written,
            };
            let squashed = g.tanh(cell)?;
            let hidden = g.mul(out_gate, squashed)?;
            state = Some((hidden, cell));
            outputs.push(hidden);
        }
        Ok(outputs)
    }
}

#[derive(Clone, Debug)]
pub struct BiLstmParams {
    pub forward: LstmParams,
    pub backward: LstmParams,
}

impl BiLstmParams {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, prefix: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        BiLstmParams {
            forward: LstmParams::new(params, &format!("{prefix}.forward"), input, hidden, rng),
            backward: LstmParams::new(params, &format!("{prefix}.backward"), input, hidden, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.forward.hidden
    }

    /// Encodes the first `len` columns of `x`; output is `2*hidden x cols`
    /// with forward states on top and zero columns past `len`.
    pub fn encode(&self, g: &mut Graph, p: Bound, x: Var, len: usize) -> Result<Var> {
        let cols = g.shape(x)[1];
        let x_true = if len < cols { g.slice_cols(x, 0, len)? } else { x };
        let fwd = self.forward.run(g, p, x_true, 0..len)?;
        let mut bwd = self.backward.run(g, p, x_true, (0..len).rev())?;
        bwd.reverse();
        let fwd = g.concat(&fwd, 1)?;
        let bwd = g.concat(&bwd, 1)?;
        let out = g.concat(&[fwd, bwd], 0)?;
        if len < cols {
            let pad = g.constant(Tensor::zeros(&[2 * self.hidden(), cols - len]));
            g.concat(&[out, pad], 1)
        } else {
            Ok(out)
        }
    }
}
