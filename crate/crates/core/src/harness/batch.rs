use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{load_params, param_blobs, Checkpoint, CheckpointHeader, CheckpointKind};
use super::common::{build_vocab, check_encoder_shape, check_loss, class_weights, fit, EncoderBundle, FitSummary, Optimizer, Sequences};
use super::config::{Method, RunConfig};
use super::metrics::{argmax, MetricsReport, Tally};
use super::RunOutput;
use crate::data::{build_history_samples, Corpus, HistorySample, Split, SplitMode};
use crate::encoder::{EncodeCache, EncoderModel, Vocab};
use crate::error::{Error, Result};
use crate::models::{batch_backward, batch_forward, BatchCache, BatchInputs, ClassifierHead, UpperTransformer, Variant};
use crate::nn::param::join;
use crate::nn::{weighted_cross_entropy, ClassWeights, Mode, Param, Parameterized};
use crate::tensor::Matrix;

/// Encoder, optional upper transformer and head trained end to end.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchModel {
    pub variant: Variant,
    pub encoder: EncoderModel,
    pub upper: Option<UpperTransformer>,
    pub head: ClassifierHead,
}

impl Parameterized for BatchModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        if let Some(u) = &self.upper {
            u.visit(&join(prefix, "upper"), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        if let Some(u) = &mut self.upper {
            u.visit_mut(&join(prefix, "upper"), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }

    fn visit_trainable_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.encoder.visit_trainable_mut(&join(prefix, "encoder"), f);
        if let Some(u) = &mut self.upper {
            u.visit_trainable_mut(&join(prefix, "upper"), f);
        }
        self.head.visit_trainable_mut(&join(prefix, "head"), f);
    }
}

struct SampleCache {
    q: EncodeCache,
    up: Option<EncodeCache>,
    history: Vec<EncodeCache>,
    batch: BatchCache,
}

fn batch_variant(cfg: &RunConfig) -> Result<Variant> {
    match cfg.method {
        Method::Model(v) if !cfg.method.is_stream() => Ok(v),
        m => Err(Error::Config(format!("{m} is not a batch method"))),
    }
}

impl BatchModel {
    /// Fresh model; starts from `encoder` (unfrozen) when given.
    pub fn new(cfg: &RunConfig, encoder: Option<EncoderModel>, vocab_size: usize, num_classes: usize) -> Result<Self> {
        let variant = batch_variant(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut encoder = match encoder {
            Some(e) => {
                check_encoder_shape(cfg, &e)?;
                e
            }
            None => EncoderModel::new(&mut rng, vocab_size, cfg.encoder_attention(), cfg.max_seq_len)?,
        };
        encoder.frozen = false;
        let upper = if variant.uses_upper() {
            Some(UpperTransformer::new(&mut rng, cfg.upper_attention(), cfg.batch_histories)?)
        } else {
            None
        };
        let head = ClassifierHead::new(&mut rng, variant.num_components() * cfg.model_dim, num_classes);
        Ok(BatchModel { variant, encoder, upper, head })
    }

    fn forward(&self, seqs: &Sequences, s: &HistorySample, mode: Mode) -> Result<(Vec<f64>, SampleCache)> {
        let (q, qc) = self.encoder.forward(&seqs.plain[s.user][s.t], mode.fork(0))?;
        let (up, upc) = if self.variant.uses_profile() {
            let (v, c) = self.encoder.forward(&seqs.profiled[s.user][s.t], mode.fork(1))?;
            (Some(v), Some(c))
        } else {
            (None, None)
        };
        let mut hist_caches = Vec::new();
        let history = if self.variant.uses_history() {
            let mut m = Matrix::zeros(s.history.len(), self.encoder.dim());
            for (k, &j) in s.history.iter().enumerate() {
                let (v, c) = self.encoder.forward(&seqs.history[s.user][j], mode.fork(2 + k as u64))?;
                m.row_mut(k).copy_from_slice(&v);
                hist_caches.push(c);
            }
            Some(m)
        } else {
            None
        };
        let inputs = BatchInputs { q: &q, u_p: up.as_deref(), history: history.as_ref() };
        let (logits, batch) = batch_forward(self.variant, inputs, self.upper.as_ref(), &self.head, mode.fork(1000))?;
        Ok((logits, SampleCache { q: qc, up: upc, history: hist_caches, batch }))
    }

    fn backward(&mut self, cache: &SampleCache, dlogits: &[f64]) -> Result<()> {
        let g = batch_backward(&cache.batch, self.upper.as_mut(), &mut self.head, dlogits)?;
        self.encoder.backward(&cache.q, &g.d_q);
        if let (Some(c), Some(d)) = (&cache.up, &g.d_up) {
            self.encoder.backward(c, d);
        }
        if let Some(dh) = &g.d_history {
            for (k, c) in cache.history.iter().enumerate() {
                self.encoder.backward(c, dh.row(k));
            }
        }
        Ok(())
    }

    pub fn predict(&self, seqs: &Sequences, s: &HistorySample) -> Result<usize> {
        Ok(argmax(&self.forward(seqs, s, Mode::Eval)?.0))
    }
}

/// Everything a batch run needs besides the model.
pub struct BatchData {
    pub seqs: Sequences,
    pub samples: Vec<HistorySample>,
    pub split: Split,
}

impl BatchData {
    pub fn new(cfg: &RunConfig, corpus: &Corpus, vocab: &Vocab) -> Result<Self> {
        let h = cfg.batch_histories;
        let samples = build_history_samples(corpus, h, h, h);
        let split = cfg.split.split(samples.len(), SplitMode::Random, cfg.seed)?;
        let seqs = Sequences::new(corpus, vocab, cfg.max_seq_len, cfg.prepend_category)?;
        Ok(BatchData { seqs, samples, split })
    }
}

pub fn evaluate_batch(model: &BatchModel, data: &BatchData, indices: &[usize], num_classes: usize) -> Result<Tally> {
    let mut tally = Tally::new(num_classes);
    for &i in indices {
        let s = &data.samples[i];
        tally.record(model.predict(&data.seqs, s)?, s.label);
    }
    Ok(tally)
}

fn train_epoch(
    model: &mut BatchModel,
    data: &BatchData,
    cfg: &RunConfig,
    weights: &ClassWeights,
    opt: &mut Optimizer,
    epoch: usize,
) -> Result<f64> {
    let mut order = data.split.train.clone();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1 + epoch as u64)));
    let (mut loss_sum, mut w_total) = (0.0, 0.0);
    for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
        let mut w_sum = 0.0;
        for (k, &i) in batch.iter().enumerate() {
            let s = &data.samples[i];
            let step = ((epoch * order.len() + b * cfg.batch_size + k) as u64) << 1;
            let (logits, cache) = model.forward(&data.seqs, s, Mode::train(cfg.seed, step))?;
            let (loss, mut dz) = weighted_cross_entropy(&Matrix::row_vector(&logits), &[s.label], weights)?;
            check_loss(loss, "batch training")?;
            let w = weights.weights()[s.label];
            dz.scale(w);
            loss_sum += w * loss;
            w_sum += w;
            model.backward(&cache, dz.row(0))?;
        }
        w_total += w_sum;
        opt.apply(model, w_sum);
    }
    Ok(if w_total > 0.0 { loss_sum / w_total } else { 0.0 })
}

pub(crate) fn make_report(
    cfg: &RunConfig,
    tally: &Tally,
    classes: &[String],
    fit: FitSummary,
) -> Result<MetricsReport> {
    Ok(MetricsReport {
        name: cfg.label(),
        method: cfg.method.name().to_string(),
        accuracy: tally.accuracy()?,
        per_class: tally.per_class(classes),
        samples: tally.samples(),
        baseline: None,
        relative_improvement: None,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        best_epoch: fit.best_epoch,
        epochs_run: fit.epochs_run,
        val_accuracy: if fit.best_val.is_finite() { fit.best_val } else { 0.0 },
    })
}

/// Trains a batch feature-set model with early stopping on validation
/// accuracy and reports test accuracy of the best epoch.
pub fn train_batch(cfg: &RunConfig, corpus: &Corpus, encoder: Option<&EncoderBundle>) -> Result<RunOutput> {
    cfg.validate()?;
    let vocab = match encoder {
        Some(b) => b.vocab.clone(),
        None => build_vocab(corpus),
    };
    let data = BatchData::new(cfg, corpus, &vocab)?;
    if data.split.train.is_empty() {
        return Err(Error::Config("no batch training samples".into()));
    }
    let c = corpus.num_classes();
    let mut model = BatchModel::new(cfg, encoder.map(|b| b.encoder.clone()), vocab.len(), c)?;
    let weights = class_weights(cfg, data.split.train.iter().map(|&i| data.samples[i].label), c);
    let steps = data.split.train.len().div_ceil(cfg.batch_size) * cfg.max_epochs;
    let mut opt = Optimizer::new(cfg, cfg.lr, steps);
    let summary = fit(
        &mut model,
        cfg,
        |m, epoch| train_epoch(m, &data, cfg, &weights, &mut opt, epoch),
        |m| evaluate_batch(m, &data, &data.split.val, c)?.accuracy(),
    )?;
    let test = evaluate_batch(&model, &data, &data.split.test, c)?;
    let report = make_report(cfg, &test, &corpus.classes, summary)?;
    let checkpoint = Checkpoint {
        header: CheckpointHeader {
            kind: CheckpointKind::Model,
            config: cfg.clone(),
            vocab: vocab.tokens().to_vec(),
            classes: corpus.classes.clone(),
            store: None,
            store_users: vec![],
        },
        blobs: param_blobs(&model, ""),
    };
    Ok(RunOutput { report, checkpoint })
}

pub fn batch_model_from_checkpoint(ck: &Checkpoint) -> Result<(BatchModel, Vocab)> {
    let vocab = Vocab::from_tokens(ck.header.vocab.clone())?;
    let mut model = BatchModel::new(&ck.header.config, None, vocab.len(), ck.header.classes.len())?;
    load_params(&mut model, "", &ck.blobs)?;
    Ok((model, vocab))
}
