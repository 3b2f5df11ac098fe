use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::common::{build_vocab, category_map, check_loss, class_weights, EncoderBundle, Optimizer};
use super::config::RunConfig;
use super::metrics::argmax;
use crate::data::Corpus;
use crate::encoder::{prepend_category, tokenize, EncoderModel, TokenSequence};
use crate::error::{Error, Result};
use crate::models::ClassifierHead;
use crate::nn::dropout::keyed_uniform;
use crate::nn::param::join;
use crate::nn::{weighted_cross_entropy, Mode, Param, Parameterized};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WarmupReport {
    pub epochs: usize,
    pub texts: usize,
    pub final_loss: f64,
    /// Running training accuracy over the last epoch.
    pub train_accuracy: f64,
    /// Eval-mode accuracy of the warm-up head on texts without category
    /// tokens.
    pub plain_accuracy: f64,
}

struct WarmupModel<'a> {
    encoder: &'a mut EncoderModel,
    head: &'a mut ClassifierHead,
}

impl Parameterized for WarmupModel<'_> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }

    fn visit_trainable_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.encoder.visit_trainable_mut(&join(prefix, "encoder"), f);
        self.head.visit_trainable_mut(&join(prefix, "head"), f);
    }
}

/// Trains a fresh encoder with a temporary linear head to classify single
/// event texts, a share of them carrying their category token, then
/// freezes it.
pub fn pretrain_encoder(cfg: &RunConfig, corpus: &Corpus) -> Result<(EncoderBundle, WarmupReport)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Config("warm-up corpus is empty".into()));
    }
    let vocab = build_vocab(corpus);
    let cats = category_map(corpus, &vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0e8c_0de5);
    let mut encoder = EncoderModel::new(&mut rng, vocab.len(), cfg.encoder_attention(), cfg.max_seq_len)?;
    let mut head = ClassifierHead::new(&mut rng, cfg.model_dim, corpus.num_classes());

    let mut texts: Vec<(TokenSequence, usize)> = Vec::with_capacity(corpus.len());
    for e in corpus.iter() {
        let with_cat = keyed_uniform(cfg.seed, e.user_id as u64, 0xca7, e.t as u64) < cfg.warmup.prepend_fraction;
        let text = if with_cat { prepend_category(&e.text, cats[e.label], &vocab)? } else { e.text.clone() };
        texts.push((tokenize(&text, &vocab, cfg.max_seq_len), e.label));
    }
    let weights = class_weights(cfg, texts.iter().map(|(_, y)| *y), corpus.num_classes());
    let batches_per_epoch = texts.len().div_ceil(cfg.batch_size);
    let mut opt = Optimizer::new(cfg, cfg.warmup.lr, batches_per_epoch * cfg.warmup.epochs);
    let mut order: Vec<usize> = (0..texts.len()).collect();
    let mut report = WarmupReport { epochs: cfg.warmup.epochs, texts: texts.len(), final_loss: 0.0, train_accuracy: 0.0, plain_accuracy: 0.0 };
    let mut counter = 0u64;
    for epoch in 0..cfg.warmup.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64)));
        let (mut loss_sum, mut w_sum_total, mut correct) = (0.0, 0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let mut w_sum = 0.0;
            for &i in batch {
                let (seq, y) = &texts[i];
                let (emb, cache) = encoder.forward(seq, Mode::train(cfg.seed, counter))?;
                counter += 1;
                let x = Matrix::row_vector(&emb);
                let logits = head.forward(&x)?;
                if argmax(logits.row(0)) == *y {
                    correct += 1;
                }
                let (loss, mut dz) = weighted_cross_entropy(&logits, &[*y], &weights)?;
                check_loss(loss, "encoder warm-up")?;
                let w = weights.weights()[*y];
                dz.scale(w);
                loss_sum += w * loss;
                w_sum += w;
                let dx = head.backward(&x, &dz);
                encoder.backward(&cache, dx.row(0));
            }
            w_sum_total += w_sum;
            opt.apply(&mut WarmupModel { encoder: &mut encoder, head: &mut head }, w_sum);
        }
        report.final_loss = loss_sum / w_sum_total;
        report.train_accuracy = correct as f64 / texts.len() as f64;
        info!("warm-up epoch {epoch}: loss {:.4}, train acc {:.4}", report.final_loss, report.train_accuracy);
    }
    let mut correct = 0usize;
    for e in corpus.iter() {
        let emb = encoder.encode(&tokenize(&e.text, &vocab, cfg.max_seq_len))?;
        if argmax(head.forward(&Matrix::row_vector(&emb))?.row(0)) == e.label {
            correct += 1;
        }
    }
    report.plain_accuracy = correct as f64 / corpus.len() as f64;
    encoder.freeze();
    Ok((EncoderBundle { encoder, vocab }, report))
}
