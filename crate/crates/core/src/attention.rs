//! Additive attention scoring and context-matrix selection.
//!
//! Instead of averaging the code columns into a single context vector, the
//! decoder receives the `d` code columns with the largest attention weights,
//! each scaled by its weight, ordered from most to least attended.

use std::cmp::Ordering;

use rand::Rng;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::encoders::Code;
use crate::error::{Error, Result};
use crate::nn::uniform;
use crate::tensor::{self, Scalar, Tensor};

/// Positions of the `d` largest weights, largest first. Ties go to the lower
/// position. Returns fewer than `d` positions when `alpha` is shorter.
pub fn top_d_indices<F: Scalar>(alpha: &[F], d: usize) -> Result<Vec<usize>> {
    if d == 0 {
        return Err(Error::InvalidArgument("context size d must be at least 1".into()));
    }
    if alpha.is_empty() {
        return Err(Error::Empty { op: "context_matrix" });
    }
    let mut order: Vec<usize> = (0..alpha.len()).collect();
    // stable: equal weights keep ascending position order
    order.sort_by(|&a, &b| alpha[b].partial_cmp(&alpha[a]).unwrap_or(Ordering::Equal));
    order.truncate(d);
    Ok(order)
}

/// A stochastic vector over code positions.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<F = f32> {
    alpha: Vec<F>,
}

impl<F: Scalar> AttentionWeights<F> {
    pub fn new(alpha: Vec<F>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::Empty { op: "attention" });
        }
        let total: f64 = alpha.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).sum();
        if alpha.iter().any(|&v| v < F::zero() || !v.is_finite()) || (total - 1.0).abs() > 1e-5 {
            return Err(Error::InvalidArgument(format!(
                "attention weights must be non-negative and sum to 1 (sum {total})"
            )));
        }
        Ok(Self { alpha })
    }

    pub fn values(&self) -> &[F] {
        &self.alpha
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }
}

/// Softmax normalisation of raw scores.
pub fn normalize<F: Scalar>(scores: &[F]) -> Result<AttentionWeights<F>> {
    Ok(AttentionWeights {
        alpha: tensor::softmax_slice(scores)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextMatrix<F = f32> {
    /// `[feature_dim, d]`; columns past the code length are zero.
    pub columns: Tensor<F>,
    pub source_indices: Vec<usize>,
}

pub fn context_matrix<F: Scalar>(alpha: &AttentionWeights<F>, code: &Code<F>, d: usize) -> Result<ContextMatrix<F>> {
    if alpha.len() != code.length() {
        return Err(Error::Shape {
            op: "context_matrix",
            lhs: vec![alpha.len()],
            rhs: code.features.shape().to_vec(),
        });
    }
    let source_indices = top_d_indices(alpha.values(), d)?;
    let feat = code.feature_dim();
    let mut columns = Tensor::zeros(&[feat, d]);
    for (slot, &j) in source_indices.iter().enumerate() {
        let a = alpha.values()[j];
        for f in 0..feat {
            columns.set2(f, slot, a * code.features.get2(f, j));
        }
    }
    Ok(ContextMatrix {
        columns,
        source_indices,
    })
}

/// Single-hidden-layer additive scorer: `v · tanh(W_h h + W_z z_i + b)`.
#[derive(Clone, Copy, Debug)]
pub struct AdditiveAttention {
    pub w_hidden: ParamId,
    pub w_code: ParamId,
    pub bias: ParamId,
    pub v: ParamId,
}

impl AdditiveAttention {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        hidden: usize,
        features: usize,
        width: usize,
        rng: &mut R,
    ) -> Self {
        let bh = 1.0 / (hidden as f64).sqrt();
        let bz = 1.0 / (features as f64).sqrt();
        let bv = 1.0 / (width as f64).sqrt();
        Self {
            w_hidden: store.add(format!("{name}.w_hidden"), uniform(rng, &[width, hidden], bh)),
            w_code: store.add(format!("{name}.w_code"), uniform(rng, &[width, features], bz)),
            bias: store.add(format!("{name}.bias"), uniform(rng, &[width, 1], bz)),
            v: store.add(format!("{name}.v"), uniform(rng, &[1, width], bv)),
        }
    }

    pub fn num_parameters(hidden: usize, features: usize, width: usize) -> usize {
        width * hidden + width * features + width + width
    }

    /// Code-side projection `W_z Z + b`, shared by every decoding step.
    pub fn keys<F: Scalar>(&self, g: &mut Graph<'_, F>, code: Var) -> Result<Var> {
        let wz = g.param(self.w_code);
        let b = g.param(self.bias);
        let k = g.matmul(wz, code)?;
        g.add_column(k, b)
    }

    /// One raw score per code position, shaped `[1, l]`.
    pub fn score<F: Scalar>(&self, g: &mut Graph<'_, F>, h: Var, keys: Var) -> Result<Var> {
        let wh = g.param(self.w_hidden);
        let v = g.param(self.v);
        let q = g.matmul(wh, h)?;
        let s = g.add_column(keys, q)?;
        let s = g.tanh(s);
        g.matmul(v, s)
    }

    /// Scores outside a training graph.
    pub fn score_code<F: Scalar>(&self, params: &ParamStore<F>, h: &Tensor<F>, code: &Code<F>) -> Result<Vec<F>> {
        let mut g = Graph::new(params);
        let hv = g.constant(h.clone());
        let z = g.constant(code.features.clone());
        let keys = self.keys(&mut g, z)?;
        let s = self.score(&mut g, hv, keys)?;
        Ok(g.value(s).data().to_vec())
    }
}

/// Attention matrix of one decoded sequence: row `i` holds the weights used
/// while emitting output character `i`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionTrace {
    pub rows: Vec<Vec<f32>>,
}

impl AttentionTrace {
    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn num_columns(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }
}

pub fn record_trace<F: Scalar>(step_alphas: &[Vec<F>]) -> Result<AttentionTrace> {
    let width = step_alphas.first().map_or(0, Vec::len);
    let mut rows = Vec::with_capacity(step_alphas.len());
    for (i, a) in step_alphas.iter().enumerate() {
        if a.len() != width {
            return Err(Error::InvalidArgument(format!(
                "ragged attention trace: row {i} has {} entries, expected {width}",
                a.len()
            )));
        }
        rows.push(a.iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect());
    }
    Ok(AttentionTrace { rows })
}
