use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::Linear;
use super::ops::softmax_in_place;
use super::param::{join, Param, Parameterized};
use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_at, matmul_bt, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub dropout_p: f64,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p {} outside [0,1)", self.dropout_p)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub num_heads: usize,
}

#[derive(Clone, Debug)]
pub struct AttentionCache {
    x: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// One `seq × seq` weight matrix per head.
    pub probs: Vec<Matrix>,
    ctx: Matrix,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(rng: &mut R, dim: usize, num_heads: usize) -> Self {
        MultiHeadAttention {
            query: Linear::new(rng, dim, dim),
            key: Linear::new(rng, dim, dim),
            value: Linear::new(rng, dim, dim),
            output: Linear::new(rng, dim, dim),
            num_heads,
        }
    }

    pub fn dim(&self) -> usize {
        self.query.input_dim()
    }

    /// `key_mask[j] == false` excludes position `j` as a key for every query.
    pub fn forward(&self, x: &Matrix, key_mask: Option<&[bool]>) -> (Matrix, AttentionCache) {
        let d = self.dim();
        let dh = d / self.num_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.query.forward(x);
        let k = self.key.forward(x);
        let v = self.value.forward(x);
        let mut ctx = Matrix::zeros(x.rows(), d);
        let mut probs = Vec::with_capacity(self.num_heads);
        for h in 0..self.num_heads {
            let qh = q.col_block(h * dh, dh);
            let kh = k.col_block(h * dh, dh);
            let vh = v.col_block(h * dh, dh);
            let mut s = matmul_bt(&qh, &kh);
            s.scale(scale);
            for r in 0..s.rows() {
                softmax_in_place(s.row_mut(r), key_mask);
            }
            ctx.set_col_block(h * dh, &matmul(&s, &vh));
            probs.push(s);
        }
        let y = self.output.forward(&ctx);
        (y, AttentionCache { x: x.clone(), q, k, v, probs, ctx })
    }

    pub fn backward(&mut self, cache: &AttentionCache, dy: &Matrix) -> Matrix {
        let d = self.dim();
        let dh = d / self.num_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let dctx = self.output.backward(&cache.ctx, dy);
        let n = cache.x.rows();
        let mut dq = Matrix::zeros(n, d);
        let mut dk = Matrix::zeros(n, d);
        let mut dv = Matrix::zeros(n, d);
        for h in 0..self.num_heads {
            let p = &cache.probs[h];
            let qh = cache.q.col_block(h * dh, dh);
            let kh = cache.k.col_block(h * dh, dh);
            let vh = cache.v.col_block(h * dh, dh);
            let dctx_h = dctx.col_block(h * dh, dh);
            let dp = matmul_bt(&dctx_h, &vh);
            dv.set_col_block(h * dh, &matmul_at(p, &dctx_h));
            let mut ds = Matrix::zeros(n, n);
            for r in 0..n {
                let pr = p.row(r);
                let dpr = dp.row(r);
                let dot: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
                let out = ds.row_mut(r);
                for c in 0..n {
                    out[c] = pr[c] * (dpr[c] - dot) * scale;
                }
            }
            dq.set_col_block(h * dh, &matmul(&ds, &kh));
            dk.set_col_block(h * dh, &matmul_at(&ds, &qh));
        }
        let mut dx = self.query.backward(&cache.x, &dq);
        dx.add_assign(&self.key.backward(&cache.x, &dk));
        dx.add_assign(&self.value.backward(&cache.x, &dv));
        dx
    }
}

impl Parameterized for MultiHeadAttention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

/// Multi-head self-attention over the rows of `x` (eval, no mask).
pub fn multi_head_attention(
    x: &Matrix,
    cfg: &AttentionConfig,
    attn: &MultiHeadAttention,
) -> Result<Matrix> {
    cfg.validate()?;
    if x.rows() == 0 {
        return Err(Error::Shape("empty sequence".into()));
    }
    if x.cols() != cfg.model_dim || attn.dim() != cfg.model_dim || attn.num_heads != cfg.num_heads {
        return Err(Error::Shape(format!(
            "input width {} / attention width {} vs model_dim {}",
            x.cols(),
            attn.dim(),
            cfg.model_dim
        )));
    }
    Ok(attn.forward(x, None).0)
}
