//! Differentiable building blocks with explicit forward and backward passes.
//!
//! Every backward function takes the upstream gradient of a scalar loss with
//! respect to the forward output and returns (or accumulates) the gradient with
//! respect to the forward inputs.

use rand::Rng;

use super::tensor::Tensor2;
use crate::error::{Error, Result};

/// Fully connected layer `y = x Wᵀ + b` with gradient accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out × in`
    pub weight: Tensor2,
    pub bias: Vec<f64>,
    pub grad_weight: Tensor2,
    pub grad_bias: Vec<f64>,
}

impl DenseLayer {
    pub fn new(weight: Tensor2, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::shape(
                "DenseLayer::new",
                format!("bias {} vs weight rows {}", bias.len(), weight.rows()),
            ));
        }
        let (o, i) = weight.shape();
        Ok(Self {
            grad_weight: Tensor2::zeros(o, i),
            grad_bias: vec![0.0; o],
            weight,
            bias,
        })
    }

    /// Uniform(-1/sqrt(in), 1/sqrt(in)) initialization for weights and bias.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        let weight = Tensor2::from_fn(output, input, |_, _| rng.random_range(-bound..bound));
        let bias = (0..output).map(|_| rng.random_range(-bound..bound)).collect();
        Self::new(weight, bias).expect("shapes agree by construction")
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &Tensor2) -> Result<Tensor2> {
        affine_forward(x, &self.weight, &self.bias)
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. `x`.
    pub fn backward(&mut self, x: &Tensor2, grad_out: &Tensor2) -> Result<Tensor2> {
        let (gx, gw, gb) = affine_backward(x, &self.weight, grad_out)?;
        self.grad_weight.add_assign(&gw)?;
        for (a, b) in self.grad_bias.iter_mut().zip(gb) {
            *a += b;
        }
        Ok(gx)
    }

    /// Like [`DenseLayer::backward`] but skips the input gradient.
    pub fn backward_params(&mut self, x: &Tensor2, grad_out: &Tensor2) -> Result<()> {
        check_affine(x, &self.weight, grad_out)?;
        self.grad_weight.add_assign(&grad_out.t_matmul(x)?)?;
        for (a, b) in self.grad_bias.iter_mut().zip(grad_out.column_sums()) {
            *a += b;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.fill(0.0);
        self.grad_bias.iter_mut().for_each(|g| *g = 0.0);
    }
}

pub fn affine_forward(x: &Tensor2, weight: &Tensor2, bias: &[f64]) -> Result<Tensor2> {
    if x.cols() != weight.cols() || bias.len() != weight.rows() {
        return Err(Error::shape(
            "affine_forward",
            format!("x {:?}, weight {:?}, bias {}", x.shape(), weight.shape(), bias.len()),
        ));
    }
    let mut y = x.matmul_t(weight)?;
    for row in y.data_mut().chunks_mut(bias.len().max(1)) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
    Ok(y)
}

fn check_affine(x: &Tensor2, weight: &Tensor2, grad_out: &Tensor2) -> Result<()> {
    if grad_out.rows() != x.rows() || grad_out.cols() != weight.rows() || x.cols() != weight.cols() {
        return Err(Error::shape(
            "affine_backward",
            format!(
                "x {:?}, weight {:?}, grad {:?}",
                x.shape(),
                weight.shape(),
                grad_out.shape()
            ),
        ));
    }
    Ok(())
}

/// Returns `(dx, dW, db)`.
pub fn affine_backward(x: &Tensor2, weight: &Tensor2, grad_out: &Tensor2) -> Result<(Tensor2, Tensor2, Vec<f64>)> {
    check_affine(x, weight, grad_out)?;
    let dx = grad_out.matmul(weight)?;
    let dw = grad_out.t_matmul(x)?;
    let db = grad_out.column_sums();
    Ok((dx, dw, db))
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus_forward(x: &Tensor2) -> Tensor2 {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = softplus(*v));
    y
}

/// `dx = grad ⊙ σ(x)` where `x` is the forward input.
pub fn softplus_backward(x: &Tensor2, grad_out: &Tensor2) -> Result<Tensor2> {
    if x.shape() != grad_out.shape() {
        return Err(Error::shape(
            "softplus_backward",
            format!("{:?} vs {:?}", x.shape(), grad_out.shape()),
        ));
    }
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&xi, &g)| g * sigmoid(xi))
        .collect();
    Tensor2::from_vec(x.rows(), x.cols(), data)
}

/// Softmax of a single vector, computed with max subtraction.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// `ln softmax(x)` evaluated in log space.
pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(x);
    x.iter().map(|v| v - lse).collect()
}

pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Row-wise softmax.
pub fn softmax_forward(x: &Tensor2) -> Tensor2 {
    let mut y = x.clone();
    let cols = y.cols().max(1);
    y.data_mut().chunks_mut(cols).for_each(softmax_in_place);
    y
}

/// Vector-Jacobian product of softmax given its output `y`:
/// `dx = y ⊙ (g − ⟨g, y⟩)`.
pub fn softmax_vjp(y: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let inner: f64 = y.iter().zip(grad_out).map(|(a, b)| a * b).sum();
    y.iter().zip(grad_out).map(|(yi, gi)| yi * (gi - inner)).collect()
}

/// Row-wise softmax backward, taking the forward output `y`.
pub fn softmax_backward(y: &Tensor2, grad_out: &Tensor2) -> Result<Tensor2> {
    if y.shape() != grad_out.shape() {
        return Err(Error::shape(
            "softmax_backward",
            format!("{:?} vs {:?}", y.shape(), grad_out.shape()),
        ));
    }
    let mut out = Tensor2::zeros(y.rows(), y.cols());
    for i in 0..y.rows() {
        out.row_mut(i).copy_from_slice(&softmax_vjp(y.row(i), grad_out.row(i)));
    }
    Ok(out)
}
