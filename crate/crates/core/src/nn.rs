//! Parameterised building blocks shared by the encoders and the decoder.

use rand::Rng;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::error::Result;
use crate::tensor::{Padding, Scalar, Tensor};

pub(crate) fn uniform<F: Scalar, R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| F::from_f64_lossy(rng.gen_range(-bound..=bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Dense layer `W x + b` applied to every column of `x`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(rng, &[outputs, inputs], bound));
        let bias = store.add(format!("{name}.bias"), uniform(rng, &[outputs, 1], bound));
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn num_parameters(inputs: usize, outputs: usize) -> usize {
        inputs * outputs + outputs
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(w, x)?;
        g.add_column(y, b)
    }
}

/// Dilated 1-D convolution with a per-channel bias.
#[derive(Clone, Copy, Debug)]
pub struct Conv1d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub dilation: usize,
    pub padding: Padding,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        inputs: usize,
        outputs: usize,
        width: usize,
        dilation: usize,
        padding: Padding,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((inputs * width) as f64).sqrt();
        let kernel = store.add(format!("{name}.kernel"), uniform(rng, &[outputs, inputs, width], bound));
        let bias = store.add(format!("{name}.bias"), uniform(rng, &[outputs, 1], bound));
        Self {
            kernel,
            bias,
            dilation,
            padding,
        }
    }

    pub fn num_parameters(inputs: usize, outputs: usize, width: usize) -> usize {
        inputs * outputs * width + outputs
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let k = g.param(self.kernel);
        let b = g.param(self.bias);
        let y = g.conv1d(x, k, self.dilation, self.padding)?;
        g.add_column(y, b)
    }
}

/// Weights of one LSTM cell (gate order: input, forget, candidate, output).
#[derive(Clone, Copy, Debug)]
pub struct LstmCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub hidden: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros<F: Scalar>(g: &mut Graph<'_, F>, hidden: usize) -> Self {
        let h = g.constant(Tensor::zeros(&[hidden, 1]));
        let c = g.constant(Tensor::zeros(&[hidden, 1]));
        Self { h, c }
    }
}

impl LstmCell {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        inputs: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_input = store.add(format!("{name}.w_input"), uniform(rng, &[4 * hidden, inputs], bound));
        let w_hidden = store.add(format!("{name}.w_hidden"), uniform(rng, &[4 * hidden, hidden], bound));
        let bias = store.add(format!("{name}.bias"), uniform(rng, &[4 * hidden, 1], bound));
        Self {
            w_input,
            w_hidden,
            bias,
            inputs,
            hidden,
        }
    }

    pub fn num_parameters(inputs: usize, hidden: usize) -> usize {
        4 * hidden * (inputs + hidden) + 4 * hidden
    }

    pub fn step<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var, state: LstmState) -> Result<LstmState> {
        lstm_step(g, x, state, self)
    }
}

/// One recurrence of a standard LSTM cell: `x` is `[inputs, 1]`, the state
/// vectors are `[hidden, 1]`.
pub fn lstm_step<F: Scalar>(g: &mut Graph<'_, F>, x: Var, state: LstmState, cell: &LstmCell) -> Result<LstmState> {
    let hsz = cell.hidden;
    let wi = g.param(cell.w_input);
    let wh = g.param(cell.w_hidden);
    let b = g.param(cell.bias);
    let zx = g.matmul(wi, x)?;
    let zh = g.matmul(wh, state.h)?;
    let z = g.add(zx, zh)?;
    let z = g.add_column(z, b)?;
    let i = g.slice_rows(z, 0, hsz)?;
    let f = g.slice_rows(z, hsz, 2 * hsz)?;
    let cand = g.slice_rows(z, 2 * hsz, 3 * hsz)?;
    let o = g.slice_rows(z, 3 * hsz, 4 * hsz)?;
    let i = g.sigmoid(i);
    let f = g.sigmoid(f);
    let cand = g.tanh(cand);
    let o = g.sigmoid(o);
    let keep = g.mul(f, state.c)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c);
    let h = g.mul(o, tc)?;
    Ok(LstmState { h, c })
}
