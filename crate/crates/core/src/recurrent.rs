//! LSTM cell and bidirectional encoder.
//!
//! Gate layout along the `4H` axis is `[input, forget, cell, output]`:
//!
//! ```text
//! z   = x_t W_ih + h_{t-1} W_hh + b
//! i   = sigmoid(z_i)    f = sigmoid(z_f)
//! g   = tanh(z_g)       o = sigmoid(z_o)
//! c_t = f * c_{t-1} + i * g
//! h_t = o * tanh(c_t)
//! ```

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{valid_len, Tensor};

pub const FORGET_BIAS_INIT: f64 = 1.0;

/// Xavier/Glorot uniform initialization.
pub fn xavier<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-limit..=limit)).collect();
    Tensor::matrix(rows, cols, data).expect("positive dims")
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    /// `d x 4H`
    pub w_ih: Tensor,
    /// `H x 4H`
    pub w_hh: Tensor,
    /// `1 x 4H`
    pub bias: Tensor,
}

impl LstmParams {
    pub fn init<R: Rng>(input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let mut bias = Tensor::zeros(1, 4 * hidden);
        bias.data_mut()[hidden..2 * hidden].fill(FORGET_BIAS_INIT);
        LstmParams {
            w_ih: xavier(input_dim, 4 * hidden, rng),
            w_hh: xavier(hidden, 4 * hidden, rng),
            bias,
        }
    }

    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        LstmParams {
            w_ih: Tensor::zeros(input_dim, 4 * hidden),
            w_hh: Tensor::zeros(hidden, 4 * hidden),
            bias: Tensor::zeros(1, 4 * hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.rows()
    }

    pub fn to_graph(&self, g: &mut Graph) -> LstmVars {
        LstmVars {
            w_ih: g.input(self.w_ih.clone()),
            w_hh: g.input(self.w_hh.clone()),
            bias: g.input(self.bias.clone()),
        }
    }
}

/// Graph handles for one direction's parameters.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
}

impl LstmVars {
    fn check(&self, g: &Graph, input: Var) -> Result<usize> {
        let w_ih = g.value(self.w_ih);
        let w_hh = g.value(self.w_hh);
        let hidden = w_hh.rows();
        let x = g.value(input);
        if x.cols() != w_ih.rows() {
            return Err(Error::Dimension {
                op: "lstm",
                lhs: x.shape().to_vec(),
                rhs: w_ih.shape().to_vec(),
            });
        }
        if w_ih.cols() != 4 * hidden || w_hh.cols() != 4 * hidden || g.value(self.bias).shape() != [1, 4 * hidden] {
            return Err(Error::contract(format!("lstm parameters do not conform to hidden size {hidden}")));
        }
        Ok(hidden)
    }
}

/// Runs the recurrence over every valid step of `input: n x d`, starting
/// from zero hidden and cell states. Masked steps carry the previous
/// hidden state forward unchanged. Returns `n x H`.
pub fn lstm_forward(g: &mut Graph, p: &LstmVars, input: Var, mask: &[bool]) -> Result<Var> {
    let hidden = p.check(g, input)?;
    let n = g.value(input).rows();
    if mask.len() != n {
        return Err(Error::contract(format!("mask length {} for {n} steps", mask.len())));
    }
    let len = valid_len(mask)?;
    let zero = g.constant(Tensor::zeros(1, hidden));
    if len == 0 {
        let z = g.constant(Tensor::zeros(n, hidden));
        return Ok(z);
    }
    let projected = g.matmul(input, p.w_ih)?;
    let projected = g.add(projected, p.bias)?;

    let mut outputs = Vec::with_capacity(n);
    let mut h_prev: Option<Var> = None;
    let mut c_prev: Option<Var> = None;
    for t in 0..len {
        let mut z = g.row_select(projected, &[t])?;
        if let Some(h) = h_prev {
            let rec = g.matmul(h, p.w_hh)?;
            z = g.add(z, rec)?;
        }
        let zi = g.slice_cols(z, 0, hidden)?;
        let zf = g.slice_cols(z, hidden, 2 * hidden)?;
        let zg = g.slice_cols(z, 2 * hidden, 3 * hidden)?;
        let zo = g.slice_cols(z, 3 * hidden, 4 * hidden)?;
        let i = g.sigmoid(zi)?;
        let gate = g.tanh(zg)?;
        let o = g.sigmoid(zo)?;
        let mut c = g.mul(i, gate)?;
        if let Some(cp) = c_prev {
            let f = g.sigmoid(zf)?;
            let keep = g.mul(f, cp)?;
            c = g.add(c, keep)?;
        }
        let tc = g.tanh(c)?;
        let h = g.mul(o, tc)?;
        outputs.push(h);
        h_prev = Some(h);
        c_prev = Some(c);
    }
    let last = h_prev.unwrap_or(zero);
    outputs.extend(std::iter::repeat_n(last, n - len));
    g.concat(&outputs, 0)
}

/// Forward and backward LSTMs over the valid prefix, concatenated per
/// position to `n x 2H`, optionally squashed by an elementwise sigmoid.
/// Padding positions are zero.
pub fn bilstm_encode(
    g: &mut Graph,
    fwd: &LstmVars,
    bwd: &LstmVars,
    input: Var,
    mask: &[bool],
    apply_sigmoid: bool,
) -> Result<Var> {
    let hf = fwd.check(g, input)?;
    let hb = bwd.check(g, input)?;
    if hf != hb {
        return Err(Error::contract(format!("direction hidden sizes differ: {hf} vs {hb}")));
    }
    let n = g.value(input).rows();
    if mask.len() != n {
        return Err(Error::contract(format!("mask length {} for {n} steps", mask.len())));
    }
    let len = valid_len(mask)?;
    if len == 0 {
        return Ok(g.constant(Tensor::zeros(n, 2 * hf)));
    }
    let valid: Vec<usize> = (0..len).collect();
    let reversed: Vec<usize> = (0..len).rev().collect();
    let all = vec![true; len];

    let x = if len == n { input } else { g.row_select(input, &valid)? };
    let xr = g.row_select(input, &reversed)?;
    let forward = lstm_forward(g, fwd, x, &all)?;
    let backward_rev = lstm_forward(g, bwd, xr, &all)?;
    let backward = g.row_select(backward_rev, &reversed)?;
    let mut out = g.concat(&[forward, backward], 1)?;
    if apply_sigmoid {
        out = g.sigmoid(out)?;
    }
    if len < n {
        let pad = g.constant(Tensor::zeros(n - len, 2 * hf));
        out = g.concat(&[out, pad], 0)?;
    }
    Ok(out)
}
