//! Self-checks on toy problems: finite-difference gradient checks of every
//! trainable module and the numerical identities of the history store.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{class_frequencies, generate, SyntheticSpec};
use crate::encoder::{EncoderModel, TokenSequence};
use crate::error::{Error, Result};
use crate::history::{HistoryStore, StoreConfig};
use crate::models::{
    aggregate_attn, aggregate_mean, batch_backward, batch_forward, incremental_backward, incremental_forward,
    BatchInputs, ClassifierHead, StepOptions, StreamModel, UpperTransformer, Variant,
};
use crate::nn::{grad_check, weighted_cross_entropy, AttentionConfig, ClassWeights, GradCheckOptions, Mode};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    /// Largest observed deviation from the reference.
    pub max_error: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, max_error: f64, tolerance: f64, detail: String) -> Self {
        CheckOutcome { name: name.into(), passed: max_error < tolerance, max_error, tolerance, detail }
    }

    fn flag(name: &str, passed: bool, detail: String) -> Self {
        CheckOutcome { name: name.into(), passed, max_error: if passed { 0.0 } else { 1.0 }, tolerance: 0.5, detail }
    }
}

const D: usize = 8;
const GRAD_TOL: f64 = 1e-4;

fn toy_cfg(layers: usize) -> AttentionConfig {
    AttentionConfig { num_layers: layers, num_heads: 2, model_dim: D, ff_dim: 16, dropout_p: 0.1 }
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_vec(r, c, rand_vec(rng, r * c)).expect("sized")
}

fn ce(logits: &[f64], y: usize, w: &ClassWeights) -> (f64, Vec<f64>) {
    let (l, dz) = weighted_cross_entropy(&Matrix::row_vector(logits), &[y], w).expect("valid");
    (l, dz.into_data())
}

/// Finite-difference checks of the encoder, upper transformer, classifier
/// head, the feature-set model and the full incremental step (d=8,
/// sequences of at most 4), all with dropout active under a fixed key.
pub fn grad_check_suite() -> Vec<CheckOutcome> {
    let opts = GradCheckOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mode = Mode::train(7, 1);
    let w = ClassWeights::new(vec![1.3, 0.7, 1.0]).expect("positive");
    let mut out = Vec::new();

    let mut enc = EncoderModel::new(&mut rng, 12, toy_cfg(1), 4).expect("valid");
    let seq = TokenSequence::from_ids(vec![2, 5, 9]).expect("valid").padded(4);
    let target = rand_vec(&mut rng, D);
    let enc_loss = |m: &mut EncoderModel, grad: bool| {
        let (e, cache) = m.forward(&seq, mode).expect("valid");
        let l: f64 = e.iter().zip(&target).map(|(a, b)| 0.5 * (a - b).powi(2)).sum();
        if grad {
            let d: Vec<f64> = e.iter().zip(&target).map(|(a, b)| a - b).collect();
            m.backward(&cache, &d);
        }
        l
    };
    let r = grad_check(&mut enc, |m| enc_loss(m, true), |m| enc_loss(m, false), &opts);
    out.push(CheckOutcome::new("encoder", r.max_rel_error, GRAD_TOL, format!("{} coords", r.coords_checked)));

    let mut ut = UpperTransformer::new(&mut rng, toy_cfg(2), 4).expect("valid");
    let x = rand_matrix(&mut rng, 4, D);
    let proj = rand_vec(&mut rng, D);
    let ut_loss = |m: &mut UpperTransformer, grad: bool| {
        let (p, cache) = m.pool(&x, mode).expect("valid");
        let l: f64 = p.iter().zip(&proj).map(|(a, b)| a * b).sum::<f64>().powi(2);
        if grad {
            let s: f64 = p.iter().zip(&proj).map(|(a, b)| a * b).sum();
            let d: Vec<f64> = proj.iter().map(|b| 2.0 * s * b).collect();
            m.pool_backward(&cache, &d);
        }
        l
    };
    let r = grad_check(&mut ut, |m| ut_loss(m, true), |m| ut_loss(m, false), &opts);
    out.push(CheckOutcome::new("upper_transformer", r.max_rel_error, GRAD_TOL, format!("{} coords", r.coords_checked)));

    let mut head = ClassifierHead::new(&mut rng, 2 * D, 3);
    let feats = Matrix::row_vector(&rand_vec(&mut rng, 2 * D));
    let head_loss = |m: &mut ClassifierHead, grad: bool| {
        let z = m.forward(&feats).expect("valid");
        let (l, dz) = ce(z.row(0), 2, &w);
        if grad {
            m.backward(&feats, &Matrix::row_vector(&dz));
        }
        l
    };
    let r = grad_check(&mut head, |m| head_loss(m, true), |m| head_loss(m, false), &opts);
    out.push(CheckOutcome::new("classifier_head", r.max_rel_error, GRAD_TOL, format!("{} coords", r.coords_checked)));

    let mut pooled = StreamModel {
        upper: Some(UpperTransformer::new(&mut rng, toy_cfg(1), 4).expect("valid")),
        head: ClassifierHead::new(&mut rng, 3 * D, 3),
    };
    let (q, up, hist) = (rand_vec(&mut rng, D), rand_vec(&mut rng, D), rand_matrix(&mut rng, 4, D));
    let pooled_loss = |m: &mut StreamModel, grad: bool| {
        let inputs = BatchInputs { q: &q, u_p: Some(&up), history: Some(&hist) };
        let (z, cache) = batch_forward(Variant::QUpUhAttn, inputs, m.upper.as_ref(), &m.head, mode).expect("valid");
        let (l, dz) = ce(&z, 0, &w);
        if grad {
            let StreamModel { upper, head } = m;
            batch_backward(&cache, upper.as_mut(), head, &dz).expect("valid");
        }
        l
    };
    let r = grad_check(&mut pooled, |m| pooled_loss(m, true), |m| pooled_loss(m, false), &opts);
    out.push(CheckOutcome::new("feature_set_model", r.max_rel_error, GRAD_TOL, format!("{} coords", r.coords_checked)));

    let n0 = 3;
    let mut inc = StreamModel {
        upper: Some(UpperTransformer::new(&mut rng, toy_cfg(2), n0 + 1).expect("valid")),
        head: ClassifierHead::new(&mut rng, 2 * D, 3),
    };
    let window = crate::history::WindowView {
        user: 0,
        t: n0 + 1,
        history: rand_matrix(&mut rng, n0, D),
        past_activity: rand_vec(&mut rng, D),
        latest: rand_vec(&mut rng, D),
    };
    let step = StepOptions { alpha: 0.3, classify_pre_update: false };
    let inc_loss = |m: &mut StreamModel, grad: bool| {
        let o = incremental_forward(&q, &window, m.upper.as_ref().expect("upper"), &m.head, step, mode).expect("valid");
        let (l, dz) = ce(&o.logits, 1, &w);
        if grad {
            let StreamModel { upper, head } = m;
            incremental_backward(&o.cache, upper.as_mut().expect("upper"), head, &dz);
        }
        l
    };
    let r = grad_check(&mut inc, |m| inc_loss(m, true), |m| inc_loss(m, false), &opts);
    out.push(CheckOutcome::new("incremental_step", r.max_rel_error, GRAD_TOL, format!("{} coords", r.coords_checked)));
    out
}

fn store_cfg(n: usize, t: usize, d: usize, t0: usize, n0: usize, alpha: f64) -> StoreConfig {
    StoreConfig {
        num_users: n,
        time_span: t,
        dim: d,
        t0,
        n0,
        alpha,
        storage: Default::default(),
        read_index: Default::default(),
    }
}

/// B after initialisation against a direct summation of A.
pub fn check_initialization() -> CheckOutcome {
    let (n, t, d) = (5, 20, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a: Vec<Vec<Vec<f64>>> = (0..n).map(|_| (0..t).map(|_| rand_vec(&mut rng, d)).collect()).collect();
    let mut store = HistoryStore::new(store_cfg(n, t, d, t, 1, 0.1)).expect("valid");
    store.initialize(&a).expect("valid");
    let mut worst: f64 = 0.0;
    for (i, rows) in a.iter().enumerate() {
        for j in 0..t {
            let b = store.b(i, j).expect("resident");
            for c in 0..d {
                let mut s = 0.0;
                for row in rows.iter().take(j + 1) {
                    s += row[c];
                }
                worst = worst.max((b[c] - s / (j + 1) as f64).abs());
            }
        }
    }
    CheckOutcome::new("initialization", worst, 1e-6, format!("n={n} T={t} d={d}"))
}

/// Streams every user through a store with a random upper transformer and
/// returns the per-step (u_profile, written value) pairs plus final store.
fn drive(alpha: f64, seed: u64) -> (Vec<(Vec<f64>, Vec<f64>)>, HistoryStore, HistoryStore) {
    let (n, t_span, d, t0, n0) = (3, 14, D, 5, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a: Vec<Vec<Vec<f64>>> = (0..n).map(|_| (0..t_span).map(|_| rand_vec(&mut rng, d)).collect()).collect();
    let ut = UpperTransformer::new(&mut rng, toy_cfg(1), n0 + 1).expect("valid");
    let head = ClassifierHead::new(&mut rng, 2 * d, 3);
    let cfg = store_cfg(n, t_span, d, t0, n0, alpha);
    let mut store = HistoryStore::new(cfg.clone()).expect("valid");
    let mut reference = HistoryStore::new(cfg).expect("valid");
    let init: Vec<Vec<Vec<f64>>> = a.iter().map(|r| r[..t0].to_vec()).collect();
    store.initialize(&init).expect("valid");
    reference.initialize(&init).expect("valid");
    let mut steps = Vec::new();
    for t in t0..t_span {
        for i in 0..n {
            let w = store.read_window(i, t).expect("in order");
            let q = rand_vec(&mut rng, d);
            let o = incremental_forward(&q, &w, &ut, &head, StepOptions { alpha, classify_pre_update: false }, Mode::Eval)
                .expect("valid");
            let written = store.momentum_update(i, t, &o.u_profile).expect("valid");
            steps.push((o.u_profile, written));
            store.append(i, &a[i][t]).expect("room");
            reference.append(i, &a[i][t]).expect("room");
        }
    }
    (steps, store, reference)
}

/// α=0 leaves B bitwise untouched, α=1 writes u_profile, α=0.5 matches the
/// unrolled two-step recurrence.
pub fn check_momentum() -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    let (_, store, reference) = drive(0.0, 21);
    let mut changed = 0usize;
    for i in 0..store.num_users() {
        for j in 0..store.filled(i) {
            let (x, y) = (store.b(i, j).expect("resident"), reference.b(i, j).expect("resident"));
            changed += x.iter().zip(y).filter(|(p, q)| p.to_bits() != q.to_bits()).count();
        }
    }
    out.push(CheckOutcome::flag("momentum_alpha0", changed == 0, format!("{changed} coordinates changed")));

    let (steps, _, _) = drive(1.0, 22);
    let worst = steps
        .iter()
        .flat_map(|(u, w)| u.iter().zip(w).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max);
    out.push(CheckOutcome::new("momentum_alpha1", worst, 1e-7, format!("{} steps", steps.len())));

    // Two steps that chain through the lagged past-activity read, with a
    // 0-layer transformer so u_profile is the plain window mean.
    let (d, t0, n0, alpha) = (4, 4, 2, 0.5);
    let t_span = t0 + n0 + 2;
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let a: Vec<Vec<f64>> = (0..t_span).map(|_| rand_vec(&mut rng, d)).collect();
    let mut ut = UpperTransformer::new(&mut rng, AttentionConfig { model_dim: d, ..toy_cfg(0) }, n0 + 1).expect("valid");
    ut.zero_positions();
    let head = ClassifierHead::new(&mut rng, 2 * d, 2);
    let mut store = HistoryStore::new(store_cfg(1, t_span, d, t0, n0, alpha)).expect("valid");
    store.initialize(&[a[..t0].to_vec()]).expect("valid");
    let prefix = |j: usize, c: usize| a[..=j].iter().map(|r| r[c]).sum::<f64>() / (j + 1) as f64;
    let mut written = Vec::new();
    for t in t0..t_span {
        let w = store.read_window(0, t).expect("in order");
        let o = incremental_forward(&a[0], &w, &ut, &head, StepOptions { alpha, classify_pre_update: false }, Mode::Eval)
            .expect("valid");
        written.push(store.momentum_update(0, t, &o.u_profile).expect("valid"));
        store.append(0, &a[t]).expect("room");
    }
    // step t0 writes B[t0-1]; step t0+n0 reads it back as past activity
    let (t1, t2) = (t0, t0 + n0);
    let mut worst: f64 = 0.0;
    for c in 0..d {
        let u1 = ((t1 - n0..t1).map(|j| a[j][c]).sum::<f64>() + prefix(t1 - n0 - 1, c)) / (n0 + 1) as f64;
        let b1 = alpha * u1 + (1.0 - alpha) * prefix(t1 - 1, c);
        let u2 = ((t2 - n0..t2).map(|j| a[j][c]).sum::<f64>() + b1) / (n0 + 1) as f64;
        let b2 = alpha * u2 + (1.0 - alpha) * prefix(t2 - 1, c);
        worst = worst.max((written[0][c] - b1).abs()).max((written[t2 - t0][c] - b2).abs());
    }
    out.push(CheckOutcome::new("momentum_alpha_half", worst, 1e-12, "two chained steps".into()));
    out
}

/// With no layers and zero positions the upper transformer is a mean.
pub fn check_degenerate() -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let d = 16;
    let mut ut = UpperTransformer::new(&mut rng, AttentionConfig { model_dim: d, ..toy_cfg(0) }, 40).expect("valid");
    ut.zero_positions();
    let mut worst: f64 = 0.0;
    for h in 1..=40 {
        let x = rand_matrix(&mut rng, h, d);
        let a = aggregate_attn(&x, &ut).expect("valid");
        let m = aggregate_mean(&x).expect("valid");
        worst = a.iter().zip(&m).map(|(p, q)| (p - q).abs()).fold(worst, f64::max);
    }
    let attn = CheckOutcome::new("degenerate_attn_mean", worst, 1e-12, "h=1..40".into());

    let n0 = 5;
    let head = ClassifierHead::new(&mut rng, 2 * d, 3);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let w = crate::history::WindowView {
            user: 0,
            t: n0 + 1,
            history: rand_matrix(&mut rng, n0, d),
            past_activity: rand_vec(&mut rng, d),
            latest: rand_vec(&mut rng, d),
        };
        let q = rand_vec(&mut rng, d);
        let o = incremental_forward(&q, &w, &ut, &head, StepOptions { alpha: 0.1, classify_pre_update: false }, Mode::Eval)
            .expect("valid");
        for c in 0..d {
            let s: f64 = (0..n0).map(|r| w.history.get(r, c)).sum::<f64>() + w.past_activity[c];
            worst = worst.max((o.u_profile[c] - s / (n0 + 1) as f64).abs());
        }
    }
    vec![attn, CheckOutcome::new("degenerate_incremental_mean", worst, 1e-12, "n0=5, 50 windows".into())]
}

/// Weighted and unweighted cross-entropy on balanced training labels.
pub fn check_weighted_loss() -> CheckOutcome {
    let spec = SyntheticSpec { num_users: 100, events_per_user: 40, seed: 41, ..Default::default() };
    let corpus = generate(&spec).expect("valid spec");
    let c = corpus.num_classes();
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for e in corpus.iter().filter(|e| e.t < 20) {
        per_class[e.label].push(e.label);
    }
    let m = per_class.iter().map(Vec::len).min().unwrap_or(0);
    let labels: Vec<usize> = (0..m).flat_map(|k| per_class.iter().map(move |v| v[k])).collect();
    let weights = class_frequencies(labels.iter().copied(), c);
    let uniform = ClassWeights::uniform(c);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst: f64 = 0.0;
    let mut batches = 0;
    for chunk in labels.chunks(64) {
        let logits = rand_matrix(&mut rng, chunk.len(), c);
        let (lw, _) = weighted_cross_entropy(&logits, chunk, &weights).expect("valid");
        let (lu, _) = weighted_cross_entropy(&logits, chunk, &uniform).expect("valid");
        worst = worst.max((lw - lu).abs());
        batches += 1;
    }
    CheckOutcome::new("weighted_loss_balanced", worst, 1e-9, format!("{} samples, {batches} batches", labels.len()))
}

/// Out-of-order reads and unmatched writes are rejected without touching
/// the store.
pub fn check_chronology() -> Result<CheckOutcome> {
    let (n, t_span, d, t0, n0) = (4, 16, 4, 5, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let a: Vec<Vec<Vec<f64>>> = (0..n).map(|_| (0..t_span).map(|_| rand_vec(&mut rng, d)).collect()).collect();
    let mut store = HistoryStore::new(store_cfg(n, t_span, d, t0, n0, 0.2))?;
    store.initialize(&a.iter().map(|r| r[..t0].to_vec()).collect::<Vec<_>>())?;
    let mut rejected = 0usize;
    let mut violations = Vec::new();
    for round in 0..200 {
        let user = rng.gen_range(0..n);
        let cursor = store.cursor(user);
        let bad_t = loop {
            let t = rng.gen_range(0..t_span + 2);
            if t != cursor + 1 {
                break t;
            }
        };
        let before = store.checksum();
        match store.read_window(user, bad_t) {
            Err(Error::Chronology { .. }) => rejected += 1,
            other => violations.push(format!("round {round}: read ({user},{bad_t}) gave {:?}", other.map(|_| ()))),
        }
        if store.momentum_update(user, cursor + 1, &vec![0.0; d]).is_ok() {
            violations.push(format!("round {round}: write without read accepted"));
        }
        if store.checksum() != before {
            violations.push(format!("round {round}: state changed by a rejected call"));
        }
        // advance one valid step so cursors move
        let t = cursor + 1;
        if t < t_span {
            let w = store.read_window(user, t)?;
            store.momentum_update(user, t, &w.history.mean_rows())?;
            store.append(user, &a[user][t])?;
        }
    }
    let passed = violations.is_empty();
    let detail = if passed { format!("{rejected} out-of-order calls rejected") } else { violations.join("; ") };
    Ok(CheckOutcome::flag("chronology_guard", passed, detail))
}

pub fn all_property_checks() -> Result<Vec<CheckOutcome>> {
    let mut out = vec![check_initialization()];
    out.extend(check_momentum());
    out.extend(check_degenerate());
    out.push(check_weighted_loss());
    out.push(check_chronology()?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for c in grad_check_suite() {
            assert!(c.passed, "{c:?}");
        }
        for c in all_property_checks().unwrap() {
            assert!(c.passed, "{c:?}");
        }
    }
}
