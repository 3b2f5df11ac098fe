//! Classifier heads, history aggregators, the batch feature-set baselines
//! and the incremental per-step model.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::history::{momentum_blend, WindowView};
use crate::nn::param::join;
use crate::nn::transformer::TransformerCache;
use crate::nn::{AttentionConfig, Linear, Mode, Param, Parameterized, TransformerEncoder};
use crate::tensor::Matrix;

/// Which features feed the classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// `[q]`
    Q,
    /// `[q, U_p]`
    QUp,
    /// `[q, U_p, U_h]`, `U_h` mean-pooled
    QUpUhMean,
    /// `[q, U_p, U_h]`, `U_h` from the upper transformer
    QUpUhAttn,
    /// `[q, U_h]` without profile, mean-pooled
    QUhMean,
    /// `[q, U_h]` without profile, upper transformer
    QUhAttn,
    /// `[q, B[i][t−1]]` from the history store
    Incremental,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Q,
        Variant::QUp,
        Variant::QUpUhMean,
        Variant::QUpUhAttn,
        Variant::QUhMean,
        Variant::QUhAttn,
        Variant::Incremental,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Q => "q",
            Variant::QUp => "q_up",
            Variant::QUpUhMean => "q_up_uh_mean",
            Variant::QUpUhAttn => "q_up_uh_attn",
            Variant::QUhMean => "q_uh_mean",
            Variant::QUhAttn => "q_uh_attn",
            Variant::Incremental => "incremental",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }

    pub fn num_components(self) -> usize {
        match self {
            Variant::Q => 1,
            Variant::QUp | Variant::QUhMean | Variant::QUhAttn | Variant::Incremental => 2,
            Variant::QUpUhMean | Variant::QUpUhAttn => 3,
        }
    }

    pub fn uses_profile(self) -> bool {
        matches!(self, Variant::QUp | Variant::QUpUhMean | Variant::QUpUhAttn)
    }

    pub fn uses_history(self) -> bool {
        !matches!(self, Variant::Q | Variant::QUp | Variant::Incremental)
    }

    /// Variants with an upper transformer.
    pub fn uses_upper(self) -> bool {
        matches!(self, Variant::QUpUhAttn | Variant::QUhAttn | Variant::Incremental)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Ordered classifier inputs for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub variant: Variant,
    pub components: Vec<Vec<f64>>,
}

impl FeatureSet {
    pub fn new(variant: Variant, components: Vec<Vec<f64>>) -> Result<Self> {
        if components.len() != variant.num_components() {
            return Err(Error::Config(format!(
                "{variant} takes {} components, got {}",
                variant.num_components(),
                components.len()
            )));
        }
        let d = components[0].len();
        if components.iter().any(|c| c.len() != d) {
            return Err(Error::Shape("feature components differ in width".into()));
        }
        Ok(FeatureSet { variant, components })
    }

    pub fn concat(&self) -> Vec<f64> {
        self.components.concat()
    }
}

/// Linear classifier over concatenated features.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub linear: Linear,
}

impl ClassifierHead {
    pub fn new<R: Rng>(rng: &mut R, input_dim: usize, num_classes: usize) -> Self {
        ClassifierHead { linear: Linear::new(rng, input_dim, num_classes) }
    }

    pub fn input_dim(&self) -> usize {
        self.linear.input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.linear.output_dim()
    }

    /// `batch × input_dim` → `batch × C`.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim() {
            return Err(Error::Shape(format!("head expects {} inputs, got {}", self.input_dim(), x.cols())));
        }
        Ok(self.linear.forward(x))
    }

    pub fn forward_one(&self, features: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(&Matrix::row_vector(features))?.into_data())
    }

    pub fn backward(&mut self, x: &Matrix, dlogits: &Matrix) -> Matrix {
        self.linear.backward(x, dlogits)
    }
}

impl Parameterized for ClassifierHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.linear.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.linear.visit_mut(prefix, f);
    }
}

/// Transformer over a sequence of d-dimensional embeddings, mean-pooled.
#[derive(Clone, Debug, PartialEq)]
pub struct UpperTransformer {
    pub encoder: TransformerEncoder,
}

#[derive(Clone, Debug)]
pub struct PoolCache {
    inner: TransformerCache,
    rows: usize,
}

impl UpperTransformer {
    pub fn new<R: Rng>(rng: &mut R, cfg: AttentionConfig, max_positions: usize) -> Result<Self> {
        Ok(UpperTransformer { encoder: TransformerEncoder::new(rng, cfg, max_positions)? })
    }

    pub fn dim(&self) -> usize {
        self.encoder.dim()
    }

    pub fn max_positions(&self) -> usize {
        self.encoder.max_positions()
    }

    pub fn zero_positions(&mut self) {
        self.encoder.positions.value.fill(0.0);
    }

    /// Mean over the rows of the encoded sequence.
    pub fn pool(&self, x: &Matrix, mode: Mode) -> Result<(Vec<f64>, PoolCache)> {
        let (y, inner) = self.encoder.forward(x, None, mode)?;
        Ok((y.mean_rows(), PoolCache { inner, rows: x.rows() }))
    }

    /// Backpropagates a gradient on the pooled vector; returns `dL/dx`.
    pub fn pool_backward(&mut self, cache: &PoolCache, d_pooled: &[f64]) -> Matrix {
        let mut dy = Matrix::zeros(cache.rows, d_pooled.len());
        let s = 1.0 / cache.rows as f64;
        for r in 0..cache.rows {
            for (o, g) in dy.row_mut(r).iter_mut().zip(d_pooled) {
                *o = g * s;
            }
        }
        self.encoder.backward(&cache.inner, &dy)
    }
}

impl Parameterized for UpperTransformer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.encoder.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.encoder.visit_mut(prefix, f);
    }
}

pub fn aggregate_mean(history_embs: &Matrix) -> Result<Vec<f64>> {
    if history_embs.rows() == 0 {
        return Err(Error::EmptyHistory);
    }
    Ok(history_embs.mean_rows())
}

pub fn aggregate_attn(history_embs: &Matrix, ut: &UpperTransformer) -> Result<Vec<f64>> {
    if history_embs.rows() == 0 {
        return Err(Error::EmptyHistory);
    }
    Ok(ut.pool(history_embs, Mode::Eval)?.0)
}

/// Modal class of a most-recent-first label list; among tied classes the
/// one occurring earliest in the list (most recently) wins.
pub fn majority_count(history_labels: &[usize]) -> Result<usize> {
    if history_labels.is_empty() {
        return Err(Error::EmptyHistory);
    }
    let mut counts: HashMap<usize, (usize, usize)> = HashMap::new();
    for (pos, &y) in history_labels.iter().enumerate() {
        let e = counts.entry(y).or_insert((0, pos));
        e.0 += 1;
    }
    let (&best, _) = counts
        .iter()
        .max_by(|(_, (ca, pa)), (_, (cb, pb))| ca.cmp(cb).then(pb.cmp(pa)))
        .expect("nonempty");
    Ok(best)
}

/// Precomputed embeddings for one batch-model sample.
#[derive(Clone, Copy, Debug)]
pub struct BatchInputs<'a> {
    pub q: &'a [f64],
    pub u_p: Option<&'a [f64]>,
    /// History embeddings, one per row.
    pub history: Option<&'a Matrix>,
}

#[derive(Clone, Debug)]
pub struct BatchCache {
    variant: Variant,
    features: Matrix,
    dim: usize,
    history_rows: usize,
    pool: Option<PoolCache>,
}

/// Gradients w.r.t. the inputs that were present.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchGrads {
    pub d_q: Vec<f64>,
    pub d_up: Option<Vec<f64>>,
    pub d_history: Option<Matrix>,
}

/// Concatenates `[q, U_p, U_h]` as the variant requires and applies the head.
pub fn batch_forward(
    variant: Variant,
    inputs: BatchInputs<'_>,
    ut: Option<&UpperTransformer>,
    head: &ClassifierHead,
    mode: Mode,
) -> Result<(Vec<f64>, BatchCache)> {
    if variant == Variant::Incremental {
        return Err(Error::Config("incremental variant has no batch forward".into()));
    }
    let d = inputs.q.len();
    let mut components = vec![inputs.q.to_vec()];
    if variant.uses_profile() {
        let up = inputs.u_p.ok_or_else(|| Error::Config(format!("{variant} needs U_p")))?;
        components.push(up.to_vec());
    }
    let mut pool = None;
    let mut history_rows = 0;
    if variant.uses_history() {
        let h = inputs.history.ok_or_else(|| Error::Config(format!("{variant} needs history embeddings")))?;
        if h.rows() == 0 {
            return Err(Error::EmptyHistory);
        }
        history_rows = h.rows();
        let u_h = if variant.uses_upper() {
            let ut = ut.ok_or_else(|| Error::Config(format!("{variant} needs an upper transformer")))?;
            let (v, c) = ut.pool(h, mode)?;
            pool = Some(c);
            v
        } else {
            aggregate_mean(h)?
        };
        components.push(u_h);
    }
    let fs = FeatureSet::new(variant, components)?;
    let features = Matrix::row_vector(&fs.concat());
    let logits = head.forward(&features)?.into_data();
    Ok((logits, BatchCache { variant, features, dim: d, history_rows, pool }))
}

pub fn batch_backward(
    cache: &BatchCache,
    ut: Option<&mut UpperTransformer>,
    head: &mut ClassifierHead,
    dlogits: &[f64],
) -> Result<BatchGrads> {
    let dx = head.backward(&cache.features, &Matrix::row_vector(dlogits));
    let dx = dx.row(0);
    let d = cache.dim;
    let mut k = 0;
    let mut take = || {
        let s = dx[k * d..(k + 1) * d].to_vec();
        k += 1;
        s
    };
    let d_q = take();
    let d_up = cache.variant.uses_profile().then(&mut take);
    let d_history = if cache.variant.uses_history() {
        let d_uh = take();
        Some(match &cache.pool {
            Some(pc) => {
                let ut = ut.ok_or_else(|| Error::Config("upper transformer required for backward".into()))?;
                ut.pool_backward(pc, &d_uh)
            }
            None => {
                let mut m = Matrix::zeros(cache.history_rows, d);
                let s = 1.0 / cache.history_rows as f64;
                for r in 0..cache.history_rows {
                    for (o, g) in m.row_mut(r).iter_mut().zip(&d_uh) {
                        *o = g * s;
                    }
                }
                m
            }
        })
    } else {
        None
    };
    Ok(BatchGrads { d_q, d_up, d_history })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOptions {
    pub alpha: f64,
    /// Feed `B[i][t−1]` from before this step's update to the classifier.
    pub classify_pre_update: bool,
}

#[derive(Clone, Debug)]
pub struct IncrementalOutput {
    pub u_profile: Vec<f64>,
    /// The value the momentum write produces for `B[i][t−1]`.
    pub b_new: Vec<f64>,
    pub logits: Vec<f64>,
    pub cache: IncrementalCache,
}

#[derive(Clone, Debug)]
pub struct IncrementalCache {
    features: Matrix,
    pool: PoolCache,
    opts: StepOptions,
}

/// One stream step: encodes `[history; past_activity]`, mean-pools it into
/// `u_profile`, blends it into `B[i][t−1]` and classifies `[q ∥ B_new]`.
/// The store itself is not touched; callers write `u_profile` back with
/// `HistoryStore::momentum_update`.
pub fn incremental_forward(
    q: &[f64],
    window: &WindowView,
    ut: &UpperTransformer,
    head: &ClassifierHead,
    opts: StepOptions,
    mode: Mode,
) -> Result<IncrementalOutput> {
    let d = ut.dim();
    if q.len() != d || window.history.cols() != d || window.past_activity.len() != d || window.latest.len() != d {
        return Err(Error::Shape(format!("incremental step inputs must all have width {d}")));
    }
    let n0 = window.history.rows();
    let mut seq = Matrix::zeros(n0 + 1, d);
    for r in 0..n0 {
        seq.row_mut(r).copy_from_slice(window.history.row(r));
    }
    seq.row_mut(n0).copy_from_slice(&window.past_activity);
    let (u_profile, pool) = ut.pool(&seq, mode)?;
    let b_new = momentum_blend(opts.alpha, &u_profile, &window.latest);
    let b_for_head = if opts.classify_pre_update { &window.latest } else { &b_new };
    let fs = FeatureSet::new(Variant::Incremental, vec![q.to_vec(), b_for_head.clone()])?;
    let features = Matrix::row_vector(&fs.concat());
    let logits = head.forward(&features)?.into_data();
    Ok(IncrementalOutput { u_profile, b_new, logits, cache: IncrementalCache { features, pool, opts } })
}

/// Accumulates gradients into `ut` and `head`. Store contents, `q` and the
/// window are treated as constants.
pub fn incremental_backward(
    cache: &IncrementalCache,
    ut: &mut UpperTransformer,
    head: &mut ClassifierHead,
    dlogits: &[f64],
) {
    let dx = head.backward(&cache.features, &Matrix::row_vector(dlogits));
    if cache.opts.classify_pre_update || cache.opts.alpha == 0.0 {
        return;
    }
    let d = ut.dim();
    let du: Vec<f64> = dx.row(0)[d..].iter().map(|g| g * cache.opts.alpha).collect();
    ut.pool_backward(&cache.pool, &du);
}

/// Upper transformer plus head, the trainable part of the stream models.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamModel {
    pub upper: Option<UpperTransformer>,
    pub head: ClassifierHead,
}

impl Parameterized for StreamModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        if let Some(u) = &self.upper {
            u.visit(&join(prefix, "upper"), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        if let Some(u) = &mut self.upper {
            u.visit_mut(&join(prefix, "upper"), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::history::{HistoryStore, StoreConfig};
    use crate::nn::{grad_check, transformer_encode, weighted_cross_entropy, ClassWeights, GradCheckOptions};
    use proptest::prelude::{prop_assert_eq, proptest, ProptestConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(layers: usize, d: usize, heads: usize, p: f64) -> AttentionConfig {
        AttentionConfig { num_layers: layers, num_heads: heads, model_dim: d, ff_dim: 2 * d, dropout_p: p }
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn degenerate_ut(d: usize, max_pos: usize) -> UpperTransformer {
        let mut ut = UpperTransformer::new(&mut ChaCha8Rng::seed_from_u64(0), cfg(0, d, 1, 0.0), max_pos).unwrap();
        ut.zero_positions();
        ut
    }

    #[test]
    fn mean_examples() {
        assert_eq!(aggregate_mean(&Matrix::row_vector(&[3.0, -1.0])).unwrap(), vec![3.0, -1.0]);
        let m = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(aggregate_mean(&m).unwrap(), vec![0.5, 0.5]);
        assert!(matches!(aggregate_mean(&Matrix::zeros(0, 2)), Err(Error::EmptyHistory)));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = random_matrix(&mut rng, 7, 5);
        let got = aggregate_mean(&h).unwrap();
        for c in 0..5 {
            let mut s = 0.0;
            for r in 0..7 {
                s += h.get(r, c);
            }
            assert!((got[c] - s / 7.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attn_reduces_to_mean_without_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ut = degenerate_ut(6, 10);
        for h in 1..=10 {
            let x = random_matrix(&mut rng, h, 6);
            let a = aggregate_attn(&x, &ut).unwrap();
            let m = aggregate_mean(&x).unwrap();
            for (p, q) in a.iter().zip(&m) {
                assert!((p - q).abs() < 1e-12);
            }
        }
        let x = random_matrix(&mut rng, 11, 6);
        assert!(matches!(aggregate_attn(&x, &ut), Err(Error::Length { len: 11, max: 10 })));
    }

    #[test]
    fn attn_single_row_is_its_encoding() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ut = UpperTransformer::new(&mut rng, cfg(2, 8, 2, 0.1), 4).unwrap();
        let x = random_matrix(&mut rng, 1, 8);
        let enc = transformer_encode(&x, &ut.encoder).unwrap();
        assert_eq!(aggregate_attn(&x, &ut).unwrap(), enc.row(0).to_vec());
    }

    /// One post-norm layer written out with plain loops.
    fn unrolled_layer(x: &Matrix, ut: &UpperTransformer) -> Matrix {
        let enc = &ut.encoder;
        let (n, d) = x.shape();
        let layer = &enc.layers[0];
        let heads = enc.cfg.num_heads;
        let hd = d / heads;
        let lin = |m: &Matrix, l: &Linear| -> Matrix {
            let mut out = Matrix::zeros(m.rows(), l.output_dim());
            for r in 0..m.rows() {
                for o in 0..l.output_dim() {
                    let mut s = l.bias.value.get(0, o);
                    for i in 0..m.cols() {
                        s += m.get(r, i) * l.weight.value.get(i, o);
                    }
                    out.set(r, o, s);
                }
            }
            out
        };
        let norm = |m: &Matrix, g: &Param, b: &Param| -> Matrix {
            let mut out = m.clone();
            for r in 0..m.rows() {
                let mu = m.row(r).iter().sum::<f64>() / d as f64;
                let var = m.row(r).iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d as f64;
                for c in 0..d {
                    out.set(r, c, (m.get(r, c) - mu) / (var + 1e-5).sqrt() * g.value.get(0, c) + b.value.get(0, c));
                }
            }
            out
        };
        let mut h = x.clone();
        for r in 0..n {
            for c in 0..d {
                h.set(r, c, x.get(r, c) + enc.positions.value.get(r, c));
            }
        }
        let (q, k, v) = (lin(&h, &layer.attn.query), lin(&h, &layer.attn.key), lin(&h, &layer.attn.value));
        let mut ctx = Matrix::zeros(n, d);
        for hh in 0..heads {
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| (0..hd).map(|c| q.get(i, hh * hd + c) * k.get(j, hh * hd + c)).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                for j in 0..n {
                    let w = (scores[j] - mx).exp() / z;
                    for c in 0..hd {
                        let cur = ctx.get(i, hh * hd + c);
                        ctx.set(i, hh * hd + c, cur + w * v.get(j, hh * hd + c));
                    }
                }
            }
        }
        let att = lin(&ctx, &layer.attn.output);
        let h1 = norm(&h.add(&att).unwrap(), &layer.ln1.gamma, &layer.ln1.beta);
        let mut up = lin(&h1, &layer.ff.up);
        for val in up.data_mut() {
            let x = *val;
            *val = 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
        }
        let down = lin(&up, &layer.ff.down);
        norm(&h1.add(&down).unwrap(), &layer.ln2.gamma, &layer.ln2.beta)
    }

    #[test]
    fn attn_matches_unrolled_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ut = UpperTransformer::new(&mut rng, cfg(1, 8, 2, 0.1), 5).unwrap();
        let x = random_matrix(&mut rng, 3, 8);
        let oracle = unrolled_layer(&x, &ut).mean_rows();
        for (a, b) in aggregate_attn(&x, &ut).unwrap().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    fn window(history: Matrix, past: Vec<f64>, latest: Vec<f64>) -> WindowView {
        WindowView { user: 0, t: history.rows() + 1, history, past_activity: past, latest }
    }

    #[test]
    fn incremental_degenerate_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 4;
        let ut = degenerate_ut(d, 4);
        let head = ClassifierHead::new(&mut rng, 2 * d, 3);
        let hist = random_matrix(&mut rng, 3, d);
        let past: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let latest: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let q: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = window(hist.clone(), past.clone(), latest);
        let out =
            incremental_forward(&q, &w, &ut, &head, StepOptions { alpha: 1.0, classify_pre_update: false }, Mode::Eval)
                .unwrap();
        let mut rows: Vec<Vec<f64>> = (0..3).map(|r| hist.row(r).to_vec()).collect();
        rows.push(past);
        let mean: Vec<f64> = (0..d).map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / 4.0).collect();
        for (a, b) in out.u_profile.iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(out.b_new, out.u_profile);
        let expect = head.forward_one(&[q.clone(), out.b_new.clone()].concat()).unwrap();
        assert_eq!(out.logits, expect);
    }

    #[test]
    fn incremental_constant_sequence() {
        let d = 4;
        let ut = degenerate_ut(d, 2);
        let head = ClassifierHead::new(&mut ChaCha8Rng::seed_from_u64(6), 2 * d, 2);
        let v = vec![0.3, -0.2, 0.9, 0.1];
        let w = window(Matrix::row_vector(&v), v.clone(), vec![0.0; d]);
        let out =
            incremental_forward(&v, &w, &ut, &head, StepOptions { alpha: 0.1, classify_pre_update: false }, Mode::Eval)
                .unwrap();
        for (a, b) in out.u_profile.iter().zip(&v) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn incremental_pipeline_matches_step_by_step_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (d, n0, alpha) = (4, 2, 0.3);
        let ut = UpperTransformer::new(&mut rng, cfg(1, d, 2, 0.1), n0 + 1).unwrap();
        let head = ClassifierHead::new(&mut rng, 2 * d, 3);
        let hist = random_matrix(&mut rng, n0, d);
        let past: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let latest: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let q: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = window(hist.clone(), past.clone(), latest.clone());
        let opts = StepOptions { alpha, classify_pre_update: false };
        let out = incremental_forward(&q, &w, &ut, &head, opts, Mode::Eval).unwrap();

        let mut rows: Vec<Vec<f64>> = (0..n0).map(|r| hist.row(r).to_vec()).collect();
        rows.push(past);
        let u = unrolled_layer(&Matrix::from_rows(&rows).unwrap(), &ut).mean_rows();
        let b: Vec<f64> = u.iter().zip(&latest).map(|(x, o)| alpha * x + (1.0 - alpha) * o).collect();
        let feats = [q.clone(), b.clone()].concat();
        for k in 0..3 {
            let mut z = head.linear.bias.value.get(0, k);
            for (i, f) in feats.iter().enumerate() {
                z += f * head.linear.weight.value.get(i, k);
            }
            assert!((out.logits[k] - z).abs() < 1e-9);
        }
        for (a, e) in out.b_new.iter().zip(&b) {
            assert!((a - e).abs() < 1e-9);
        }

        let again = incremental_forward(&q, &w, &ut, &head, opts, Mode::Eval).unwrap();
        assert_eq!(
            out.logits.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            again.logits.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );

        let pre = incremental_forward(&q, &w, &ut, &head, StepOptions { classify_pre_update: true, ..opts }, Mode::Eval)
            .unwrap();
        assert_eq!(pre.logits, head.forward_one(&[q.clone(), latest].concat()).unwrap());

        let bad = window(hist, vec![0.0; d + 1], vec![0.0; d]);
        assert!(matches!(incremental_forward(&q, &bad, &ut, &head, opts, Mode::Eval), Err(Error::Shape(_))));
    }

    #[test]
    fn incremental_output_agrees_with_store_write() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = 4;
        let cfgs = StoreConfig {
            num_users: 1,
            time_span: 6,
            dim: d,
            t0: 4,
            n0: 2,
            alpha: 0.25,
            storage: Default::default(),
            read_index: Default::default(),
        };
        let mut store = HistoryStore::new(cfgs).unwrap();
        let init: Vec<Vec<f64>> = (0..4).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        store.initialize(&[init]).unwrap();
        let ut = UpperTransformer::new(&mut rng, cfg(1, d, 2, 0.0), 3).unwrap();
        let head = ClassifierHead::new(&mut rng, 2 * d, 2);
        let w = store.read_window(0, 4).unwrap();
        let q = vec![0.1; d];
        let out = incremental_forward(&q, &w, &ut, &head, StepOptions { alpha: 0.25, classify_pre_update: false }, Mode::Eval)
            .unwrap();
        let written = store.momentum_update(0, 4, &out.u_profile).unwrap();
        assert_eq!(written, out.b_new);
    }

    #[test]
    fn incremental_step_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (d, n0) = (8, 3);
        let mut model = StreamModel {
            upper: Some(UpperTransformer::new(&mut rng, cfg(2, d, 2, 0.1), n0 + 1).unwrap()),
            head: ClassifierHead::new(&mut rng, 2 * d, 3),
        };
        let w = window(
            random_matrix(&mut rng, n0, d),
            (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let q: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let opts = StepOptions { alpha: 0.4, classify_pre_update: false };
        let weights = ClassWeights::new(vec![1.5, 0.5, 1.0]).unwrap();
        let mode = Mode::train(11, 3);
        let loss = |m: &mut StreamModel, grad: bool| {
            let out = incremental_forward(&q, &w, m.upper.as_ref().unwrap(), &m.head, opts, mode).unwrap();
            let (l, dz) = weighted_cross_entropy(&Matrix::row_vector(&out.logits), &[2], &weights).unwrap();
            if grad {
                let StreamModel { upper, head } = m;
                incremental_backward(&out.cache, upper.as_mut().unwrap(), head, dz.row(0));
            }
            l
        };
        let rep = grad_check(&mut model, |m| loss(m, true), |m| loss(m, false), &GradCheckOptions::default());
        assert!(rep.max_rel_error < 1e-4, "{:?}", rep.worst);
    }

    fn batch_toy(variant: Variant) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let d = 8;
        let mut model = StreamModel {
            upper: variant.uses_upper().then(|| UpperTransformer::new(&mut rng, cfg(1, d, 2, 0.1), 4).unwrap()),
            head: ClassifierHead::new(&mut rng, variant.num_components() * d, 3),
        };
        let q: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let up: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h = random_matrix(&mut rng, 4, d);
        let loss = |m: &mut StreamModel, grad: bool| {
            let inputs = BatchInputs { q: &q, u_p: Some(&up), history: Some(&h) };
            let (z, cache) = batch_forward(variant, inputs, m.upper.as_ref(), &m.head, Mode::train(1, 1)).unwrap();
            let (l, dz) = weighted_cross_entropy(&Matrix::row_vector(&z), &[1], &ClassWeights::uniform(3)).unwrap();
            if grad {
                let StreamModel { upper, head } = m;
                batch_backward(&cache, upper.as_mut(), head, dz.row(0)).unwrap();
            }
            l
        };
        grad_check(&mut model, |m| loss(m, true), |m| loss(m, false), &GradCheckOptions::default()).max_rel_error
    }

    #[test]
    fn batch_variant_gradients() {
        for v in [Variant::Q, Variant::QUp, Variant::QUpUhMean, Variant::QUpUhAttn, Variant::QUhAttn] {
            let e = batch_toy(v);
            assert!(e < 1e-4, "{v}: {e}");
        }
    }

    #[test]
    fn batch_input_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let d = 4;
        let ut = UpperTransformer::new(&mut rng, cfg(1, d, 2, 0.0), 3).unwrap();
        let head = ClassifierHead::new(&mut rng, 3 * d, 2);
        let q: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let up: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h = random_matrix(&mut rng, 3, d);
        let f = |h: &Matrix| {
            let inputs = BatchInputs { q: &q, u_p: Some(&up), history: Some(h) };
            let (z, _) = batch_forward(Variant::QUpUhAttn, inputs, Some(&ut), &head, Mode::Eval).unwrap();
            weighted_cross_entropy(&Matrix::row_vector(&z), &[0], &ClassWeights::uniform(2)).unwrap().0
        };
        let inputs = BatchInputs { q: &q, u_p: Some(&up), history: Some(&h) };
        let (z, cache) = batch_forward(Variant::QUpUhAttn, inputs, Some(&ut), &head, Mode::Eval).unwrap();
        let (_, dz) = weighted_cross_entropy(&Matrix::row_vector(&z), &[0], &ClassWeights::uniform(2)).unwrap();
        let (mut ut2, mut head2) = (ut.clone(), head.clone());
        let g = batch_backward(&cache, Some(&mut ut2), &mut head2, dz.row(0)).unwrap();
        let dh = g.d_history.unwrap();
        for i in 0..h.data().len() {
            let (mut hp, mut hm) = (h.clone(), h.clone());
            hp.data_mut()[i] += 1e-6;
            hm.data_mut()[i] -= 1e-6;
            let num = (f(&hp) - f(&hm)) / 2e-6;
            assert!((num - dh.data()[i]).abs() < 1e-7, "{i}: {num} vs {}", dh.data()[i]);
        }
        assert_eq!(g.d_q.len(), d);
        assert_eq!(g.d_up.unwrap().len(), d);
    }

    #[test]
    fn batch_arity_and_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let d = 4;
        let q = [0.5, -0.5, 1.0, 0.0];
        let up = [0.1, 0.2, 0.3, 0.4];
        let h = random_matrix(&mut rng, 2, d);
        let head_q = ClassifierHead::new(&mut rng, d, 3);
        let (z, _) =
            batch_forward(Variant::Q, BatchInputs { q: &q, u_p: None, history: None }, None, &head_q, Mode::Eval).unwrap();
        assert_eq!(z.len(), 3);
        assert_eq!(head_q.input_dim(), d);

        let head = ClassifierHead::new(&mut rng, 3 * d, 3);
        let inputs = BatchInputs { q: &q, u_p: Some(&up), history: Some(&h) };
        let (z, _) = batch_forward(Variant::QUpUhMean, inputs, None, &head, Mode::Eval).unwrap();
        let manual = head.forward_one(&[q.to_vec(), up.to_vec(), aggregate_mean(&h).unwrap()].concat()).unwrap();
        assert_eq!(z, manual);
        let permuted = head.forward_one(&[up.to_vec(), q.to_vec(), aggregate_mean(&h).unwrap()].concat()).unwrap();
        assert_ne!(z, permuted);

        let missing = BatchInputs { q: &q, u_p: None, history: Some(&h) };
        assert!(matches!(batch_forward(Variant::QUpUhMean, missing, None, &head, Mode::Eval), Err(Error::Config(_))));
        let no_ut = BatchInputs { q: &q, u_p: Some(&up), history: Some(&h) };
        assert!(matches!(batch_forward(Variant::QUpUhAttn, no_ut, None, &head, Mode::Eval), Err(Error::Config(_))));
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
        }
    }

    #[test]
    fn majority_examples() {
        assert_eq!(majority_count(&[3, 3, 1]).unwrap(), 3);
        assert_eq!(majority_count(&[1]).unwrap(), 1);
        assert_eq!(majority_count(&[2, 5, 5, 2]).unwrap(), 2);
        assert!(matches!(majority_count(&[]), Err(Error::EmptyHistory)));
    }

    fn brute_force_majority(labels: &[usize]) -> usize {
        let mut counts = [0usize; 8];
        for &y in labels {
            counts[y] += 1;
        }
        let top = *counts.iter().max().unwrap();
        *labels.iter().find(|&&y| counts[y] == top).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn majority_matches_brute_force(labels in proptest::collection::vec(0usize..8, 1..=40)) {
            prop_assert_eq!(majority_count(&labels).unwrap(), brute_force_majority(&labels));
        }
    }
}
