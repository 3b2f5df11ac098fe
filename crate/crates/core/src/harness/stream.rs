use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::batch::make_report;
use super::checkpoint::{load_params, param_blobs, Checkpoint, CheckpointHeader, CheckpointKind};
use super::common::{check_encoder_shape, check_loss, class_weights, fit, EncoderBundle, FitSummary, Optimizer, Sequences};
use super::config::{Method, RunConfig};
use super::metrics::{argmax, Tally};
use super::RunOutput;
use crate::data::{build_stream_dataset, Corpus, Split, SplitMode, StreamDataset, StreamSample};
use crate::encoder::{EncoderModel, Vocab};
use crate::error::{Error, Result};
use crate::history::{HistoryStore, StoreConfig};
use crate::models::{
    batch_backward, batch_forward, incremental_backward, incremental_forward, majority_count, BatchInputs,
    ClassifierHead, StepOptions, StreamModel, UpperTransformer, Variant,
};
use crate::nn::{weighted_cross_entropy, ClassWeights, Mode};
use crate::tensor::Matrix;

/// Frozen embeddings of every event plus the stream samples and the
/// post-initialisation store.
pub struct StreamData {
    pub dataset: StreamDataset,
    pub split: Split,
    /// Incoming-text embeddings `[user][t]`.
    pub q_emb: Vec<Vec<Vec<f64>>>,
    /// History embeddings `[user][t]` (category-prefixed when enabled).
    pub hist_emb: Vec<Vec<Vec<f64>>>,
    pub labels: Vec<Vec<usize>>,
    /// Store row of each corpus user, if it has one.
    pub store_rows: Vec<Option<usize>>,
    pub snapshot: HistoryStore,
}

impl StreamData {
    pub fn new(cfg: &RunConfig, corpus: &Corpus, bundle: &EncoderBundle) -> Result<Self> {
        let enc = &bundle.encoder;
        if !enc.frozen {
            return Err(Error::Config("stream methods need a frozen encoder".into()));
        }
        check_encoder_shape(cfg, enc)?;
        let dataset = build_stream_dataset(corpus, cfg.t0, cfg.n0)?;
        // Pooled baselines learn in batch from whole histories; the
        // incremental model and the majority count follow the stream.
        let mode = match cfg.method {
            Method::Model(Variant::QUhMean | Variant::QUhAttn) => cfg.pooled_split,
            _ => SplitMode::Chronological,
        };
        let split = cfg.split.split(dataset.samples.len(), mode, cfg.seed)?;
        let seqs = Sequences::new(corpus, &bundle.vocab, enc.max_len(), cfg.prepend_category)?;
        let mut q_emb = Vec::with_capacity(corpus.num_users());
        let mut hist_emb = Vec::with_capacity(corpus.num_users());
        for (plain, hist) in seqs.plain.iter().zip(&seqs.history) {
            let q: Vec<Vec<f64>> = plain.iter().map(|s| enc.encode(s)).collect::<Result<_>>()?;
            let h = if cfg.prepend_category {
                hist.iter().map(|s| enc.encode(s)).collect::<Result<_>>()?
            } else {
                q.clone()
            };
            q_emb.push(q);
            hist_emb.push(h);
        }
        let labels = corpus.events.iter().map(|evs| evs.iter().map(|e| e.label).collect()).collect();
        let mut store_rows = vec![None; corpus.num_users()];
        for (row, &u) in dataset.users.iter().enumerate() {
            store_rows[u] = Some(row);
        }
        let store_cfg = StoreConfig {
            num_users: dataset.users.len(),
            time_span: corpus.time_span(),
            dim: cfg.model_dim,
            t0: cfg.t0,
            n0: cfg.n0,
            alpha: cfg.alpha,
            storage: cfg.storage,
            read_index: cfg.read_index,
        };
        let mut snapshot = HistoryStore::new(store_cfg)?;
        let init: Vec<Vec<Vec<f64>>> = dataset.users.iter().map(|&u| hist_emb[u][..cfg.t0].to_vec()).collect();
        snapshot.initialize(&init)?;
        Ok(StreamData { dataset, split, q_emb, hist_emb, labels, store_rows, snapshot })
    }

    fn sample(&self, i: usize) -> StreamSample {
        self.dataset.samples[i]
    }

    /// Up to `max` history embeddings before `t`, most recent first.
    fn history(&self, s: StreamSample, max: usize) -> Matrix {
        let h = max.min(s.t);
        let d = self.hist_emb[s.user][0].len();
        let mut m = Matrix::zeros(h, d);
        for k in 0..h {
            m.row_mut(k).copy_from_slice(&self.hist_emb[s.user][s.t - 1 - k]);
        }
        m
    }

    fn history_labels(&self, s: StreamSample, max: usize) -> Vec<usize> {
        (1..=max.min(s.t)).map(|k| self.labels[s.user][s.t - k]).collect()
    }
}

fn stream_variant(cfg: &RunConfig) -> Result<Variant> {
    match cfg.method {
        Method::Model(v) if cfg.method.is_stream() => Ok(v),
        m => Err(Error::Config(format!("{m} is not a trainable stream method"))),
    }
}

pub fn new_stream_model(cfg: &RunConfig, num_classes: usize) -> Result<StreamModel> {
    let variant = stream_variant(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let upper = match variant {
        Variant::Incremental => Some(UpperTransformer::new(&mut rng, cfg.upper_attention(), cfg.n0 + 1)?),
        Variant::QUhAttn => Some(UpperTransformer::new(&mut rng, cfg.upper_attention(), cfg.stream_histories)?),
        _ => None,
    };
    let head = ClassifierHead::new(&mut rng, variant.num_components() * cfg.model_dim, num_classes);
    Ok(StreamModel { upper, head })
}

fn step_options(cfg: &RunConfig) -> StepOptions {
    StepOptions { alpha: cfg.alpha, classify_pre_update: cfg.classify_pre_update }
}

/// One incremental step on sample `i`: read, forward, momentum write,
/// append this event's history embedding.
fn incremental_step(
    model: &StreamModel,
    data: &StreamData,
    cfg: &RunConfig,
    store: &mut HistoryStore,
    s: StreamSample,
    mode: Mode,
) -> Result<crate::models::IncrementalOutput> {
    let row = data.store_rows[s.user].ok_or_else(|| Error::Index(format!("user {} has no store row", s.user)))?;
    let window = store.read_window(row, s.t)?;
    let upper = model.upper.as_ref().expect("incremental model has an upper transformer");
    let out = incremental_forward(&data.q_emb[s.user][s.t], &window, upper, &model.head, step_options(cfg), mode)?;
    store.momentum_update(row, s.t, &out.u_profile)?;
    store.append(row, &data.hist_emb[s.user][s.t])?;
    Ok(out)
}

/// Runs the stream over `indices` in eval mode, optionally tallying
/// predictions.
pub fn advance_incremental(
    model: &StreamModel,
    data: &StreamData,
    cfg: &RunConfig,
    store: &mut HistoryStore,
    indices: &[usize],
    mut tally: Option<&mut Tally>,
) -> Result<()> {
    for &i in indices {
        let s = data.sample(i);
        let out = incremental_step(model, data, cfg, store, s, Mode::Eval)?;
        if let Some(t) = tally.as_deref_mut() {
            t.record(argmax(&out.logits), s.label);
        }
    }
    Ok(())
}

fn train_incremental_epoch(
    model: &mut StreamModel,
    data: &StreamData,
    cfg: &RunConfig,
    weights: &ClassWeights,
    opt: &mut Optimizer,
    epoch: usize,
) -> Result<f64> {
    let mut store = data.snapshot.clone();
    let (mut loss_sum, mut w_total) = (0.0, 0.0);
    let n = data.split.train.len();
    for (b, batch) in data.split.train.chunks(cfg.batch_size).enumerate() {
        let mut w_sum = 0.0;
        for (k, &i) in batch.iter().enumerate() {
            let s = data.sample(i);
            let step = (epoch * n + b * cfg.batch_size + k) as u64;
            let out = incremental_step(model, data, cfg, &mut store, s, Mode::train(cfg.seed, step))?;
            let (loss, mut dz) = weighted_cross_entropy(&Matrix::row_vector(&out.logits), &[s.label], weights)?;
            check_loss(loss, "incremental training")?;
            let w = weights.weights()[s.label];
            dz.scale(w);
            loss_sum += w * loss;
            w_sum += w;
            let StreamModel { upper, head } = model;
            incremental_backward(&out.cache, upper.as_mut().expect("upper"), head, dz.row(0));
        }
        w_total += w_sum;
        opt.apply(model, w_sum);
    }
    Ok(if w_total > 0.0 { loss_sum / w_total } else { 0.0 })
}

fn validate_incremental(model: &StreamModel, data: &StreamData, cfg: &RunConfig, c: usize) -> Result<f64> {
    let mut store = data.snapshot.clone();
    advance_incremental(model, data, cfg, &mut store, &data.split.train, None)?;
    let mut tally = Tally::new(c);
    advance_incremental(model, data, cfg, &mut store, &data.split.val, Some(&mut tally))?;
    tally.accuracy()
}

/// Test tally of an incremental model, replaying the stream from the
/// initial store through train and validation first. Returns the final store.
pub fn test_incremental(model: &StreamModel, data: &StreamData, cfg: &RunConfig, c: usize) -> Result<(Tally, HistoryStore)> {
    let mut store = data.snapshot.clone();
    advance_incremental(model, data, cfg, &mut store, &data.split.train, None)?;
    advance_incremental(model, data, cfg, &mut store, &data.split.val, None)?;
    let mut tally = Tally::new(c);
    advance_incremental(model, data, cfg, &mut store, &data.split.test, Some(&mut tally))?;
    Ok((tally, store))
}

fn pooled_logits(
    model: &StreamModel,
    data: &StreamData,
    cfg: &RunConfig,
    variant: Variant,
    s: StreamSample,
    mode: Mode,
) -> Result<(Vec<f64>, crate::models::BatchCache)> {
    let hist = data.history(s, cfg.stream_histories);
    let inputs = BatchInputs { q: &data.q_emb[s.user][s.t], u_p: None, history: Some(&hist) };
    batch_forward(variant, inputs, model.upper.as_ref(), &model.head, mode)
}

pub fn evaluate_pooled(
    model: &StreamModel,
    data: &StreamData,
    cfg: &RunConfig,
    indices: &[usize],
    c: usize,
) -> Result<Tally> {
    let variant = stream_variant(cfg)?;
    let mut tally = Tally::new(c);
    for &i in indices {
        let s = data.sample(i);
        let (z, _) = pooled_logits(model, data, cfg, variant, s, Mode::Eval)?;
        tally.record(argmax(&z), s.label);
    }
    Ok(tally)
}

fn train_pooled_epoch(
    model: &mut StreamModel,
    data: &StreamData,
    cfg: &RunConfig,
    weights: &ClassWeights,
    opt: &mut Optimizer,
    epoch: usize,
) -> Result<f64> {
    let variant = stream_variant(cfg)?;
    let mut order = data.split.train.clone();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1 + epoch as u64)));
    let (mut loss_sum, mut w_total) = (0.0, 0.0);
    for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
        let mut w_sum = 0.0;
        for (k, &i) in batch.iter().enumerate() {
            let s = data.sample(i);
            let step = (epoch * order.len() + b * cfg.batch_size + k) as u64;
            let (z, cache) = pooled_logits(model, data, cfg, variant, s, Mode::train(cfg.seed, step))?;
            let (loss, mut dz) = weighted_cross_entropy(&Matrix::row_vector(&z), &[s.label], weights)?;
            check_loss(loss, "stream baseline training")?;
            let w = weights.weights()[s.label];
            dz.scale(w);
            loss_sum += w * loss;
            w_sum += w;
            let StreamModel { upper, head } = model;
            batch_backward(&cache, upper.as_mut(), head, dz.row(0))?;
        }
        w_total += w_sum;
        opt.apply(model, w_sum);
    }
    Ok(if w_total > 0.0 { loss_sum / w_total } else { 0.0 })
}

pub fn evaluate_majority(data: &StreamData, cfg: &RunConfig, indices: &[usize], c: usize) -> Result<Tally> {
    let mut tally = Tally::new(c);
    for &i in indices {
        let s = data.sample(i);
        tally.record(majority_count(&data.history_labels(s, cfg.stream_histories))?, s.label);
    }
    Ok(tally)
}

fn header(cfg: &RunConfig, corpus: &Corpus, vocab: &Vocab, data: &StreamData, with_store: bool) -> CheckpointHeader {
    CheckpointHeader {
        kind: CheckpointKind::Model,
        config: cfg.clone(),
        vocab: vocab.tokens().to_vec(),
        classes: corpus.classes.clone(),
        store: with_store.then(|| data.snapshot.config().clone()),
        store_users: data.dataset.users.clone(),
    }
}

/// Trains and tests a stream method on `corpus` with a frozen encoder.
pub fn train_stream(cfg: &RunConfig, corpus: &Corpus, bundle: &EncoderBundle) -> Result<RunOutput> {
    cfg.validate()?;
    let data = StreamData::new(cfg, corpus, bundle)?;
    let c = corpus.num_classes();
    if data.split.train.is_empty() || data.split.test.is_empty() {
        return Err(Error::Config("stream has too few samples to split".into()));
    }
    let mut blobs = param_blobs(&bundle.encoder, "encoder");
    if cfg.method == Method::Majority {
        let val = evaluate_majority(&data, cfg, &data.split.val, c)?;
        let test = evaluate_majority(&data, cfg, &data.split.test, c)?;
        let summary = FitSummary { best_epoch: 0, epochs_run: 0, best_val: val.accuracy().unwrap_or(0.0) };
        let report = make_report(cfg, &test, &corpus.classes, summary)?;
        let checkpoint = Checkpoint { header: header(cfg, corpus, &bundle.vocab, &data, false), blobs };
        return Ok(RunOutput { report, checkpoint });
    }
    let variant = stream_variant(cfg)?;
    let mut model = new_stream_model(cfg, c)?;
    let weights = class_weights(cfg, data.split.train.iter().map(|&i| data.sample(i).label), c);
    let steps = data.split.train.len().div_ceil(cfg.batch_size) * cfg.max_epochs;
    let mut opt = Optimizer::new(cfg, cfg.lr, steps);
    let (summary, test, store) = if variant == Variant::Incremental {
        let summary = fit(
            &mut model,
            cfg,
            |m, epoch| train_incremental_epoch(m, &data, cfg, &weights, &mut opt, epoch),
            |m| validate_incremental(m, &data, cfg, c),
        )?;
        let (test, store) = test_incremental(&model, &data, cfg, c)?;
        (summary, test, Some(store))
    } else {
        let summary = fit(
            &mut model,
            cfg,
            |m, epoch| train_pooled_epoch(m, &data, cfg, &weights, &mut opt, epoch),
            |m| evaluate_pooled(m, &data, cfg, &data.split.val, c)?.accuracy(),
        )?;
        (summary, evaluate_pooled(&model, &data, cfg, &data.split.test, c)?, None)
    };
    let report = make_report(cfg, &test, &corpus.classes, summary)?;
    blobs.extend(param_blobs(&model, ""));
    if let Some(s) = &store {
        blobs.extend(s.to_blobs());
    }
    let checkpoint = Checkpoint { header: header(cfg, corpus, &bundle.vocab, &data, store.is_some()), blobs };
    Ok(RunOutput { report, checkpoint })
}

/// Rebuilds the frozen encoder stored in a stream or encoder checkpoint.
pub fn encoder_from_checkpoint(ck: &Checkpoint) -> Result<EncoderBundle> {
    let vocab = Vocab::from_tokens(ck.header.vocab.clone())?;
    let cfg = &ck.header.config;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut encoder = EncoderModel::new(&mut rng, vocab.len(), cfg.encoder_attention(), cfg.max_seq_len)?;
    load_params(&mut encoder, "encoder", &ck.blobs)?;
    encoder.freeze();
    Ok(EncoderBundle { encoder, vocab })
}

pub fn stream_model_from_checkpoint(ck: &Checkpoint) -> Result<StreamModel> {
    let mut model = new_stream_model(&ck.header.config, ck.header.classes.len())?;
    load_params(&mut model, "", &ck.blobs)?;
    Ok(model)
}

/// Recomputes test metrics of a stream checkpoint on `corpus`.
pub fn evaluate_stream_checkpoint(ck: &Checkpoint, corpus: &Corpus) -> Result<super::metrics::MetricsReport> {
    let cfg = &ck.header.config;
    let bundle = encoder_from_checkpoint(ck)?;
    let data = StreamData::new(cfg, corpus, &bundle)?;
    let c = corpus.num_classes();
    let test = match cfg.method {
        Method::Majority => evaluate_majority(&data, cfg, &data.split.test, c)?,
        Method::Model(Variant::Incremental) => test_incremental(&stream_model_from_checkpoint(ck)?, &data, cfg, c)?.0,
        Method::Model(_) => evaluate_pooled(&stream_model_from_checkpoint(ck)?, &data, cfg, &data.split.test, c)?,
    };
    make_report(cfg, &test, &corpus.classes, FitSummary::default())
}
