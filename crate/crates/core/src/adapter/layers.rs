//! Layers with explicit forward caches and backward passes.

use rand::Rng;

use crate::linalg::{matmul, matmul_nt, matmul_tn_acc, Matrix};

pub(crate) const LN_EPS: f64 = 1e-5;

/// `y = x W + b` with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Matrix::zeros(inputs, outputs),
            bias: vec![0.0; outputs],
        }
    }

    /// Xavier-uniform weights, zero bias.
    pub fn xavier<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let a = (6.0 / (inputs + outputs) as f64).sqrt();
        let data = (0..inputs * outputs).map(|_| rng.random_range(-a..=a)).collect();
        Self {
            weight: Matrix::from_vec(inputs, outputs, data).unwrap(),
            bias: vec![0.0; outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut y = matmul(x, &self.weight);
        y.add_row_broadcast(&self.bias);
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Matrix, dy: &Matrix, grad: &mut Linear) -> Matrix {
        matmul_tn_acc(x, dy, &mut grad.weight);
        dy.col_sums_into(&mut grad.bias);
        matmul_nt(dy, &self.weight)
    }

    pub(crate) fn tensors(&self) -> [&[f64]; 2] {
        [self.weight.as_slice(), &self.bias]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut [f64]; 2] {
        [self.weight.as_mut_slice(), &mut self.bias]
    }
}

/// Per-token layer normalisation with learned scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

pub(crate) struct LayerNormCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(width: usize) -> Self {
        Self {
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
        }
    }

    pub fn zeros(width: usize) -> Self {
        Self {
            gamma: vec![0.0; width],
            beta: vec![0.0; width],
        }
    }

    pub(crate) fn forward(&self, x: &Matrix) -> (Matrix, LayerNormCache) {
        let n = x.cols() as f64;
        let mut xhat = Matrix::zeros(x.rows(), x.cols());
        let mut y = Matrix::zeros(x.rows(), x.cols());
        let mut inv_std = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(inv);
            let xh = xhat.row_mut(r);
            for (o, v) in xh.iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            let xr = xhat.row(r);
            for (((o, &g), &b), &v) in y.row_mut(r).iter_mut().zip(&self.gamma).zip(&self.beta).zip(xr) {
                *o = g * v + b;
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub(crate) fn backward(&self, cache: &LayerNormCache, dy: &Matrix, grad: &mut LayerNorm) -> Matrix {
        let n = dy.cols() as f64;
        let mut dx = Matrix::zeros(dy.rows(), dy.cols());
        let mut dxhat = vec![0.0; dy.cols()];
        for r in 0..dy.rows() {
            let xh = cache.xhat.row(r);
            let dyr = dy.row(r);
            for i in 0..dyr.len() {
                grad.gamma[i] += dyr[i] * xh[i];
                grad.beta[i] += dyr[i];
                dxhat[i] = dyr[i] * self.gamma[i];
            }
            let mean_d = dxhat.iter().sum::<f64>() / n;
            let mean_dx = dxhat.iter().zip(xh).map(|(d, x)| d * x).sum::<f64>() / n;
            let inv = cache.inv_std[r];
            for (i, o) in dx.row_mut(r).iter_mut().enumerate() {
                *o = inv * (dxhat[i] - mean_d - xh[i] * mean_dx);
            }
        }
        dx
    }

    pub(crate) fn tensors(&self) -> [&[f64]; 2] {
        [&self.gamma, &self.beta]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut [f64]; 2] {
        [&mut self.gamma, &mut self.beta]
    }
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GELU.
pub(crate) fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + libm::erf(u * FRAC_1_SQRT_2))
}

pub(crate) fn gelu_grad(u: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(u * FRAC_1_SQRT_2));
    let pdf = FRAC_1_SQRT_2PI * (-0.5 * u * u).exp();
    cdf + u * pdf
}
