//! Dense row-major tensors and the raw kernels behind the autograd graph.
//!
//! Everything here is generic over [`Scalar`] so the same code paths can be
//! instantiated in `f32` for training and in `f64` for numerical gradient
//! verification.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating point element type accepted by tensors.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "tensor extents must be positive, got {shape:?}"
        );
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: F) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Column vector `[n, 1]`.
    pub fn column(values: Vec<F>) -> Result<Self> {
        let n = values.len();
        Self::new(vec![n, 1], values)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = F::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Trailing extent for 2-D tensors, 1 for vectors.
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn get2(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols() + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: F) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[F] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn column_values(&self, c: usize) -> Vec<F> {
        (0..self.rows()).map(|r| self.get2(r, c)).collect()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| G::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }
}

pub(crate) fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] = acc[i] + x[i] * y[i];
        }
    }
    let mut tail = F::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail = tail + x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha * x`
pub(crate) fn axpy<F: Scalar>(y: &mut [F], alpha: F, x: &[F]) {
    debug_assert_eq!(x.len(), y.len());
    for (a, &b) in y.iter_mut().zip(x) {
        *a = *a + alpha * b;
    }
}

fn check_matrix<F: Scalar>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Shape {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(())
}

pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    check_matrix("matmul", a, b)?;
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![F::zero(); m * n];
    if n == 1 {
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(&a.data[i * k..(i + 1) * k], &b.data);
        }
    } else {
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a.data[i * k + p];
                if av != F::zero() {
                    axpy(row, av, &b.data[p * n..(p + 1) * n]);
                }
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Accumulates the gradients of `c = a @ b` into `da` and `db`.
pub(crate) fn matmul_backward<F: Scalar>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    dc: &[F],
    da: Option<&mut [F]>,
    db: Option<&mut [F]>,
) {
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    if let Some(da) = da {
        for i in 0..m {
            let g = &dc[i * n..(i + 1) * n];
            let row = &mut da[i * k..(i + 1) * k];
            if n == 1 {
                if g[0] != F::zero() {
                    axpy(row, g[0], &b.data);
                }
            } else {
                for (p, r) in row.iter_mut().enumerate() {
                    *r = *r + dot(g, &b.data[p * n..(p + 1) * n]);
                }
            }
        }
    }
    if let Some(db) = db {
        for i in 0..m {
            let g = &dc[i * n..(i + 1) * n];
            let arow = &a.data[i * k..(i + 1) * k];
            if n == 1 {
                if g[0] != F::zero() {
                    axpy(db, g[0], arow);
                }
            } else {
                for (p, &av) in arow.iter().enumerate() {
                    if av != F::zero() {
                        axpy(&mut db[p * n..(p + 1) * n], av, g);
                    }
                }
            }
        }
    }
}

/// How a length-preserving 1-D convolution pads its input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Padding {
    /// Zeros split around the sequence; taps centred on the output position.
    Symmetric,
    /// Zeros only before position 0: `out[t]` reads `in[t - j*dilation]`.
    CausalLeft,
    /// Mirror of `CausalLeft`: `out[t]` reads `in[t + j*dilation]`.
    CausalRight,
}

impl Padding {
    pub(crate) fn offset(self, tap: usize, kernel: usize, dilation: usize) -> isize {
        let (j, d) = (tap as isize, dilation as isize);
        match self {
            Padding::Symmetric => (j - ((kernel as isize - 1) / 2)) * d,
            Padding::CausalLeft => -j * d,
            Padding::CausalRight => j * d,
        }
    }
}

/// Output positions `t` in `0..len` for which `t + offset` stays inside the input.
fn valid_range(len: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (len as isize - offset.max(0)).max(0) as usize;
    (lo.min(len), hi.min(len))
}

fn check_conv<F: Scalar>(input: &Tensor<F>, kernel: &Tensor<F>, dilation: usize) -> Result<()> {
    if dilation == 0 {
        return Err(Error::InvalidArgument("conv1d: dilation must be positive".into()));
    }
    if input.shape.len() != 2 || kernel.shape.len() != 3 || kernel.shape[1] != input.shape[0] {
        return Err(Error::Shape {
            op: "conv1d",
            lhs: input.shape.clone(),
            rhs: kernel.shape.clone(),
        });
    }
    Ok(())
}

/// Length-preserving dilated 1-D convolution.
///
/// `input` is `[channels, length]`, `kernel` is `[out, in, k]`.
pub fn conv1d<F: Scalar>(
    input: &Tensor<F>,
    kernel: &Tensor<F>,
    dilation: usize,
    padding: Padding,
) -> Result<Tensor<F>> {
    check_conv(input, kernel, dilation)?;
    let (cin, len) = (input.shape[0], input.shape[1]);
    let (cout, k) = (kernel.shape[0], kernel.shape[2]);
    let mut out = vec![F::zero(); cout * len];
    for o in 0..cout {
        let orow = &mut out[o * len..(o + 1) * len];
        for c in 0..cin {
            let xrow = &input.data[c * len..(c + 1) * len];
            for j in 0..k {
                let w = kernel.data[(o * cin + c) * k + j];
                if w == F::zero() {
                    continue;
                }
                let off = padding.offset(j, k, dilation);
                let (lo, hi) = valid_range(len, off);
                if lo < hi {
                    let src = &xrow[(lo as isize + off) as usize..(hi as isize + off) as usize];
                    axpy(&mut orow[lo..hi], w, src);
                }
            }
        }
    }
    Tensor::new(vec![cout, len], out)
}

pub(crate) fn conv1d_backward<F: Scalar>(
    input: &Tensor<F>,
    kernel: &Tensor<F>,
    dilation: usize,
    padding: Padding,
    dy: &[F],
    mut dx: Option<&mut [F]>,
    mut dw: Option<&mut [F]>,
) {
    let (cin, len) = (input.shape[0], input.shape[1]);
    let (cout, k) = (kernel.shape[0], kernel.shape[2]);
    for o in 0..cout {
        let g = &dy[o * len..(o + 1) * len];
        for c in 0..cin {
            let xrow = &input.data[c * len..(c + 1) * len];
            for j in 0..k {
                let off = padding.offset(j, k, dilation);
                let (lo, hi) = valid_range(len, off);
                if lo >= hi {
                    continue;
                }
                let (slo, shi) = ((lo as isize + off) as usize, (hi as isize + off) as usize);
                let widx = (o * cin + c) * k + j;
                if let Some(dw) = dw.as_deref_mut() {
                    dw[widx] = dw[widx] + dot(&g[lo..hi], &xrow[slo..shi]);
                }
                if let Some(dx) = dx.as_deref_mut() {
                    let w = kernel.data[widx];
                    if w != F::zero() {
                        axpy(&mut dx[c * len + slo..c * len + shi], w, &g[lo..hi]);
                    }
                }
            }
        }
    }
}

/// Softmax over all elements, computed with max-subtraction.
pub fn softmax<F: Scalar>(v: &Tensor<F>) -> Result<Tensor<F>> {
    let data = softmax_slice(v.data())?;
    Tensor::new(v.shape.clone(), data)
}

pub(crate) fn softmax_slice<F: Scalar>(v: &[F]) -> Result<Vec<F>> {
    if v.is_empty() {
        return Err(Error::Empty { op: "softmax" });
    }
    let max = v.iter().copied().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = v.iter().map(|&x| (x - max).exp()).collect();
    let total: F = exps.iter().copied().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

pub fn log_softmax<F: Scalar>(v: &Tensor<F>) -> Result<Tensor<F>> {
    let data = log_softmax_slice(v.data())?;
    Tensor::new(v.shape.clone(), data)
}

pub(crate) fn log_softmax_slice<F: Scalar>(v: &[F]) -> Result<Vec<F>> {
    if v.is_empty() {
        return Err(Error::Empty { op: "log_softmax" });
    }
    let max = v.iter().copied().fold(F::neg_infinity(), F::max);
    let total: F = v.iter().map(|&x| (x - max).exp()).sum();
    let lse = max + total.ln();
    Ok(v.iter().map(|&x| x - lse).collect())
}

/// Mean negative log-probability of `targets` over the rows of `log_probs`
/// (`[steps, vocab]`), skipping positions equal to `pad`.
pub fn nll_loss<F: Scalar>(log_probs: &Tensor<F>, targets: &[usize], pad: usize) -> Result<F> {
    let vocab = log_probs.cols();
    if log_probs.rows() != targets.len() {
        return Err(Error::Shape {
            op: "nll_loss",
            lhs: log_probs.shape.clone(),
            rhs: vec![targets.len()],
        });
    }
    let mut total = F::zero();
    let mut count = 0usize;
    for (t, &y) in targets.iter().enumerate() {
        if y == pad {
            continue;
        }
        if y >= vocab {
            return Err(Error::IndexOutOfRange { index: y, size: vocab });
        }
        total = total - log_probs.get2(t, y);
        count += 1;
    }
    if count == 0 {
        return Err(Error::NoContributingPositions);
    }
    Ok(total / F::from_usize(count).unwrap())
}
