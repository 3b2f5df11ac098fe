use rand::Rng;

use super::ops::{gelu, gelu_grad};
use super::param::{join, Param, Parameterized};
use crate::tensor::{matmul, matmul_at_acc, matmul_bt, Matrix};

/// Glorot-uniform initialised matrix.
pub fn glorot<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

pub fn normal_init<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Matrix {
    // Box-Muller; avoids pulling in rand_distr for one distribution.
    let data = (0..rows * cols)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen();
            std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

/// `y = x · W + b`, with `W` stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng>(rng: &mut R, input: usize, output: usize) -> Self {
        Linear { weight: Param::new(glorot(rng, input, output)), bias: Param::zeros(1, output) }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut y = matmul(x, &self.weight.value);
        let b = self.bias.value.row(0);
        for r in 0..y.rows() {
            for (v, bv) in y.row_mut(r).iter_mut().zip(b) {
                *v += bv;
            }
        }
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: &Matrix, dy: &Matrix) -> Matrix {
        matmul_at_acc(x, dy, &mut self.weight.grad);
        let gb = self.bias.grad.row_mut(0);
        for r in 0..dy.rows() {
            for (g, d) in gb.iter_mut().zip(dy.row(r)) {
                *g += d;
            }
        }
        matmul_bt(dy, &self.weight.value)
    }
}

impl Parameterized for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        let mut gamma = Matrix::zeros(1, dim);
        gamma.fill(1.0);
        LayerNorm { gamma: Param::new(gamma), beta: Param::zeros(1, dim), eps: 1e-5 }
    }

    pub fn forward(&self, x: &Matrix) -> (Matrix, LayerNormCache) {
        let n = x.cols() as f64;
        let mut xhat = Matrix::zeros(x.rows(), x.cols());
        let mut y = Matrix::zeros(x.rows(), x.cols());
        let mut inv_std = Vec::with_capacity(x.rows());
        let g = self.gamma.value.row(0);
        let b = self.beta.value.row(0);
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + self.eps).sqrt();
            inv_std.push(inv);
            let xr = xhat.row_mut(r);
            for (h, v) in xr.iter_mut().zip(row) {
                *h = (v - mean) * inv;
            }
            let yr = y.row_mut(r);
            for c in 0..yr.len() {
                yr[c] = g[c] * xhat.get(r, c) + b[c];
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &LayerNormCache, dy: &Matrix) -> Matrix {
        let n = dy.cols() as f64;
        let mut dx = Matrix::zeros(dy.rows(), dy.cols());
        for r in 0..dy.rows() {
            let dyr = dy.row(r);
            let xh = cache.xhat.row(r);
            {
                let gg = self.gamma.grad.row_mut(0);
                for c in 0..dyr.len() {
                    gg[c] += dyr[c] * xh[c];
                }
                let gb = self.beta.grad.row_mut(0);
                for c in 0..dyr.len() {
                    gb[c] += dyr[c];
                }
            }
            let g = self.gamma.value.row(0);
            let mut sum_d = 0.0;
            let mut sum_dx = 0.0;
            for c in 0..dyr.len() {
                let d = dyr[c] * g[c];
                sum_d += d;
                sum_dx += d * xh[c];
            }
            let inv = cache.inv_std[r];
            let out = dx.row_mut(r);
            for c in 0..out.len() {
                let d = dyr[c] * g[c];
                out[c] = inv / n * (n * d - sum_d - xh[c] * sum_dx);
            }
        }
        dx
    }
}

impl Parameterized for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

/// Position-wise `Linear → GELU → Linear`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

#[derive(Clone, Debug)]
pub struct FeedForwardCache {
    x: Matrix,
    pre: Matrix,
    act: Matrix,
}

impl FeedForward {
    pub fn new<R: Rng>(rng: &mut R, dim: usize, hidden: usize) -> Self {
        FeedForward { up: Linear::new(rng, dim, hidden), down: Linear::new(rng, hidden, dim) }
    }

    pub fn forward(&self, x: &Matrix) -> (Matrix, FeedForwardCache) {
        let pre = self.up.forward(x);
        let mut act = pre.clone();
        act.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        let y = self.down.forward(&act);
        (y, FeedForwardCache { x: x.clone(), pre, act })
    }

    pub fn backward(&mut self, cache: &FeedForwardCache, dy: &Matrix) -> Matrix {
        let mut dact = self.down.backward(&cache.act, dy);
        for (d, p) in dact.data_mut().iter_mut().zip(cache.pre.data()) {
            *d *= gelu_grad(*p);
        }
        self.up.backward(&cache.x, &dact)
    }
}

impl Parameterized for FeedForward {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.up.visit(&join(prefix, "up"), f);
        self.down.visit(&join(prefix, "down"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.up.visit_mut(&join(prefix, "up"), f);
        self.down.visit_mut(&join(prefix, "down"), f);
    }
}
