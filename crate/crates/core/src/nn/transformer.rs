use rand::Rng;

use super::attention::{AttentionCache, AttentionConfig, MultiHeadAttention};
use super::dropout::{self, Mode};
use super::layers::{normal_init, FeedForward, FeedForwardCache, LayerNorm, LayerNormCache};
use super::param::{join, Param, Parameterized};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Post-norm encoder layer:
/// `h = LN(x + drop(attn(x)))`, `y = LN(h + drop(ff(h)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub ff: FeedForward,
    pub ln2: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct LayerCache {
    pub attn: AttentionCache,
    drop1: Option<Vec<f64>>,
    ln1: LayerNormCache,
    ff: FeedForwardCache,
    drop2: Option<Vec<f64>>,
    ln2: LayerNormCache,
}

impl EncoderLayer {
    pub fn new<R: Rng>(rng: &mut R, cfg: &AttentionConfig) -> Self {
        EncoderLayer {
            attn: MultiHeadAttention::new(rng, cfg.model_dim, cfg.num_heads),
            ln1: LayerNorm::new(cfg.model_dim),
            ff: FeedForward::new(rng, cfg.model_dim, cfg.ff_dim),
            ln2: LayerNorm::new(cfg.model_dim),
        }
    }

    fn forward(
        &self,
        x: &Matrix,
        key_mask: Option<&[bool]>,
        mode: Mode,
        p: f64,
        site: u64,
    ) -> (Matrix, LayerCache) {
        let (mut a, attn) = self.attn.forward(x, key_mask);
        let drop1 = dropout::mask(mode, p, site, a.data().len());
        dropout::apply(a.data_mut(), &drop1);
        a.add_assign(x);
        let (h, ln1) = self.ln1.forward(&a);
        let (mut f, ff) = self.ff.forward(&h);
        let drop2 = dropout::mask(mode, p, site + 1, f.data().len());
        dropout::apply(f.data_mut(), &drop2);
        f.add_assign(&h);
        let (y, ln2) = self.ln2.forward(&f);
        (y, LayerCache { attn, drop1, ln1, ff, drop2, ln2 })
    }

    fn backward(&mut self, cache: &LayerCache, dy: &Matrix) -> Matrix {
        let dsum2 = self.ln2.backward(&cache.ln2, dy);
        let mut dff = dsum2.clone();
        dropout::apply(dff.data_mut(), &cache.drop2);
        let mut dh = self.ff.backward(&cache.ff, &dff);
        dh.add_assign(&dsum2);
        let dsum1 = self.ln1.backward(&cache.ln1, &dh);
        let mut dattn = dsum1.clone();
        dropout::apply(dattn.data_mut(), &cache.drop1);
        let mut dx = self.attn.backward(&cache.attn, &dattn);
        dx.add_assign(&dsum1);
        dx
    }
}

impl Parameterized for EncoderLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.attn.visit(&join(prefix, "attn"), f);
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.ff.visit(&join(prefix, "ff"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        self.ff.visit_mut(&join(prefix, "ff"), f);
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
    }
}

/// Learned positional embeddings added once at entry, followed by a stack
/// of post-norm encoder layers.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerEncoder {
    pub cfg: AttentionConfig,
    pub positions: Param,
    pub layers: Vec<EncoderLayer>,
}

#[derive(Clone, Debug)]
pub struct TransformerCache {
    entry_drop: Option<Vec<f64>>,
    pub layers: Vec<LayerCache>,
}

impl TransformerEncoder {
    pub fn new<R: Rng>(rng: &mut R, cfg: AttentionConfig, max_positions: usize) -> Result<Self> {
        cfg.validate()?;
        let positions = Param::new(normal_init(rng, max_positions, cfg.model_dim, 0.02));
        let layers = (0..cfg.num_layers).map(|_| EncoderLayer::new(rng, &cfg)).collect();
        Ok(TransformerEncoder { cfg, positions, layers })
    }

    pub fn max_positions(&self) -> usize {
        self.positions.value.rows()
    }

    pub fn dim(&self) -> usize {
        self.cfg.model_dim
    }

    pub fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.rows() == 0 {
            return Err(Error::Shape("empty sequence".into()));
        }
        if x.cols() != self.cfg.model_dim {
            return Err(Error::Shape(format!(
                "input width {} vs model_dim {}",
                x.cols(),
                self.cfg.model_dim
            )));
        }
        if x.rows() > self.max_positions() {
            return Err(Error::Length { len: x.rows(), max: self.max_positions() });
        }
        Ok(())
    }

    pub fn forward(
        &self,
        x: &Matrix,
        key_mask: Option<&[bool]>,
        mode: Mode,
    ) -> Result<(Matrix, TransformerCache)> {
        self.check_input(x)?;
        if let Some(m) = key_mask {
            if m.len() != x.rows() || !m.iter().any(|&k| k) {
                return Err(Error::Shape("key mask must cover the sequence with a valid key".into()));
            }
        }
        let p = self.cfg.dropout_p;
        let mut h = x.clone();
        for r in 0..h.rows() {
            for (v, pv) in h.row_mut(r).iter_mut().zip(self.positions.value.row(r)) {
                *v += pv;
            }
        }
        let entry_drop = dropout::mask(mode, p, 0, h.data().len());
        dropout::apply(h.data_mut(), &entry_drop);
        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let (y, cache) = layer.forward(&h, key_mask, mode, p, 1 + 2 * l as u64);
            layers.push(cache);
            h = y;
        }
        Ok((h, TransformerCache { entry_drop, layers }))
    }

    /// Backpropagates `dy` and returns the gradient w.r.t. the input rows.
    pub fn backward(&mut self, cache: &TransformerCache, dy: &Matrix) -> Matrix {
        let mut d = dy.clone();
        for (layer, lc) in self.layers.iter_mut().zip(&cache.layers).rev() {
            d = layer.backward(lc, &d);
        }
        dropout::apply(d.data_mut(), &cache.entry_drop);
        for r in 0..d.rows() {
            for (g, v) in self.positions.grad.row_mut(r).iter_mut().zip(d.row(r)) {
                *g += v;
            }
        }
        d
    }
}

impl Parameterized for TransformerEncoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "positions"), &self.positions);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layer{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "positions"), &mut self.positions);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layer{i}")), f);
        }
    }
}

/// Eval-mode forward pass of the whole stack.
pub fn transformer_encode(x: &Matrix, encoder: &TransformerEncoder) -> Result<Matrix> {
    Ok(encoder.forward(x, None, Mode::Eval)?.0)
}
