use increvec::data::{build_stream_dataset, generate, Corpus, SplitMode, SyntheticSpec};
use increvec::harness::checkpoint::Checkpoint;
use increvec::harness::config::StackDims;
use increvec::harness::stream::{advance_incremental, stream_model_from_checkpoint, StreamData};
use increvec::harness::{evaluate_checkpoint, pretrain_encoder, run, train_batch, EncoderBundle, Method, RunConfig, Tally};
use increvec::history::HistoryStore;
use increvec::models::Variant;
use increvec::Error;

fn tiny_cfg(method: Method) -> RunConfig {
    let stack = StackDims { num_layers: 1, num_heads: 2, ff_dim: 16 };
    let mut cfg = RunConfig {
        method,
        model_dim: 8,
        encoder: stack,
        upper: stack,
        max_seq_len: 12,
        n0: 2,
        t0: 4,
        batch_histories: 2,
        stream_histories: 6,
        lr: 3e-3,
        batch_size: 8,
        max_epochs: 3,
        ..Default::default()
    };
    cfg.warmup.epochs = 2;
    cfg
}

fn desk_cfg(method: Method) -> RunConfig {
    let stack = StackDims { num_layers: 1, num_heads: 4, ff_dim: 64 };
    RunConfig { method, model_dim: 32, encoder: stack, upper: stack, max_seq_len: 16, lr: 3e-3, ..Default::default() }
}

fn corpus(users: usize, events: usize, classes: usize, seed: u64) -> Corpus {
    generate(&SyntheticSpec {
        num_users: users,
        events_per_user: events,
        num_classes: classes,
        topics_per_user: 2.min(classes),
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn encoder(cfg: &RunConfig, pre: &Corpus) -> EncoderBundle {
    pretrain_encoder(&RunConfig { method: Method::Model(Variant::Q), ..cfg.clone() }, pre).unwrap().0
}

fn mean(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; rows[0].len()];
    for r in rows {
        for (a, b) in m.iter_mut().zip(r) {
            *a += b;
        }
    }
    m.iter().map(|v| v / rows.len() as f64).collect()
}

#[test]
fn one_epoch_on_ten_samples() {
    // 2 users × 7 events with 2 histories → events 2..7 of each user.
    let c = corpus(2, 7, 4, 3);
    let cfg = RunConfig { max_epochs: 1, ..tiny_cfg(Method::Model(Variant::Q)) };
    let out = train_batch(&cfg, &c, None).unwrap();
    assert!((0.0..=1.0).contains(&out.report.accuracy));
    assert_eq!(out.report.epochs_run, 1);
    let split = cfg.split.split(10, SplitMode::Random, cfg.seed).unwrap();
    assert_eq!(out.report.samples, split.test.len());
}

#[test]
fn separable_two_class_corpus() {
    let c = generate(&SyntheticSpec {
        num_users: 20,
        events_per_user: 20,
        num_classes: 2,
        topics_per_user: 2,
        topic_token_rate: 1.0,
        topic_overlap: 0.0,
        noise_rate: 0.0,
        seed: 4,
        ..Default::default()
    })
    .unwrap();
    let cfg = RunConfig { model_dim: 16, max_epochs: 15, ..tiny_cfg(Method::Model(Variant::Q)) };
    let out = train_batch(&cfg, &c, None).unwrap();
    assert!(out.report.accuracy >= 0.95, "accuracy {}", out.report.accuracy);
}

#[test]
fn batch_runs_are_reproducible() {
    let c = corpus(6, 10, 3, 5);
    let cfg = tiny_cfg(Method::Model(Variant::QUpUhAttn));
    let a = run(&cfg, &c, None).unwrap();
    let b = run(&cfg, &c, None).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    assert_eq!(a.report.config_hash, cfg.hash());
}

#[test]
fn alpha_zero_keeps_static_profile() {
    let pre = corpus(10, 16, 4, 100);
    let c = corpus(8, 16, 4, 6);
    let cfg = RunConfig { alpha: 0.0, ..tiny_cfg(Method::Model(Variant::Incremental)) };
    let bundle = encoder(&cfg, &pre);
    let out = run(&cfg, &c, Some(&bundle)).unwrap();

    let ck = &out.checkpoint;
    let store = HistoryStore::from_blobs(ck.header.store.clone().unwrap(), &ck.blobs_with_prefix("store.")).unwrap();
    let data = StreamData::new(&cfg, &c, &bundle).unwrap();
    for (row, &u) in data.dataset.users.iter().enumerate() {
        for j in 0..store.filled(row) {
            let expect = mean(&data.hist_emb[u][..=j]);
            let got = store.b(row, j).unwrap();
            let err = got.iter().zip(&expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-12, "B[{row}][{j}] off by {err}");
        }
    }

    // A classifier fed [q ∥ prefix mean] reproduces the reported accuracy.
    let model = stream_model_from_checkpoint(ck).unwrap();
    let mut tally = Tally::new(c.num_classes());
    for &i in &data.split.test {
        let s = data.dataset.samples[i];
        let mut x = data.q_emb[s.user][s.t].clone();
        x.extend(mean(&data.hist_emb[s.user][..s.t]));
        let z = model.head.forward_one(&x).unwrap();
        tally.record(increvec::harness::metrics::argmax(&z), s.label);
    }
    assert!((tally.accuracy().unwrap() - out.report.accuracy).abs() < 1e-12);
}

#[test]
fn single_user_stream_runs_in_order() {
    let cfg = tiny_cfg(Method::Model(Variant::Incremental));
    let c = corpus(1, cfg.t0 + 2, 3, 7);
    let ds = build_stream_dataset(&c, cfg.t0, cfg.n0).unwrap();
    let order: Vec<usize> = ds.samples.iter().map(|s| s.t).collect();
    assert_eq!(order, vec![cfg.t0, cfg.t0 + 1]);

    let bundle = encoder(&cfg, &corpus(4, 10, 3, 70));
    let data = StreamData::new(&cfg, &c, &bundle).unwrap();
    let model = increvec::harness::stream::new_stream_model(&cfg, c.num_classes()).unwrap();
    let mut store = data.snapshot.clone();
    let before = store.checksum();
    let err = advance_incremental(&model, &data, &cfg, &mut store, &[1, 0], None).unwrap_err();
    assert!(matches!(err, Error::Chronology { .. }));
    assert_eq!(store.checksum(), before);
    advance_incremental(&model, &data, &cfg, &mut store, &[0, 1], None).unwrap();
    assert_eq!(store.filled(0), cfg.t0 + 2);
}

#[test]
fn stream_checkpoint_round_trip() {
    let c = corpus(8, 14, 4, 8);
    let cfg = tiny_cfg(Method::Model(Variant::Incremental));
    let bundle = encoder(&cfg, &corpus(8, 14, 4, 80));
    let out = run(&cfg, &c, Some(&bundle)).unwrap();
    let bytes = out.checkpoint.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, out.checkpoint);
    assert_eq!(back.to_bytes(), bytes);
    let again = evaluate_checkpoint(&back, &c).unwrap();
    assert_eq!(again.accuracy, out.report.accuracy);
    assert_eq!(again.per_class, out.report.per_class);

    let mut corrupt = bytes.clone();
    corrupt[bytes.len() / 2] ^= 1;
    assert!(Checkpoint::from_bytes(&corrupt).is_err());
}

#[test]
fn stream_methods_need_frozen_encoder() {
    let c = corpus(4, 12, 3, 9);
    let cfg = tiny_cfg(Method::Model(Variant::Incremental));
    assert!(matches!(run(&cfg, &c, None), Err(Error::Config(_))));
    let mut bundle = encoder(&cfg, &c);
    bundle.encoder.frozen = false;
    assert!(matches!(run(&cfg, &c, Some(&bundle)), Err(Error::Config(_))));
    let wide = RunConfig { model_dim: 16, ..cfg.clone() };
    bundle.encoder.freeze();
    assert!(matches!(run(&wide, &c, Some(&bundle)), Err(Error::Config(_))));
}

#[test]
fn momentum_beats_static_profile_on_drift() {
    let base = desk_cfg(Method::Model(Variant::Incremental));
    let bundle = encoder(&base, &generate(&SyntheticSpec { seed: 1000, ..Default::default() }).unwrap());
    let mut wins = 0;
    for seed in 1..=3 {
        let c = generate(&SyntheticSpec { num_users: 50, events_per_user: 60, seed, ..Default::default() }).unwrap();
        let cfg = RunConfig { seed, ..base.clone() };
        let moving = run(&cfg, &c, Some(&bundle)).unwrap().report.accuracy;
        let fixed = run(&RunConfig { alpha: 0.0, ..cfg }, &c, Some(&bundle)).unwrap().report.accuracy;
        if moving > fixed {
            wins += 1;
        }
    }
    assert!(wins >= 2, "momentum won {wins}/3");
}
