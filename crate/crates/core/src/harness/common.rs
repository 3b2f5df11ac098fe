use log::info;

use super::config::{RunConfig, Schedule};
use crate::data::Corpus;
use crate::encoder::{category_token, prepend_category, prepend_profile, tokenize, EncoderModel, TokenSequence, Vocab};
use crate::error::{Error, Result};
use crate::nn::{adamw_step, AdamWConfig, ClassWeights, Parameterized};

/// A frozen or trainable text encoder with the vocabulary it was built on.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBundle {
    pub encoder: EncoderModel,
    pub vocab: Vocab,
}

/// The run's encoder shape must match a supplied encoder so checkpoints
/// rebuild from the config alone.
pub fn check_encoder_shape(cfg: &RunConfig, enc: &EncoderModel) -> Result<()> {
    let have = &enc.transformer.cfg;
    let want = cfg.encoder_attention();
    let same = have.num_layers == want.num_layers
        && have.num_heads == want.num_heads
        && have.model_dim == want.model_dim
        && have.ff_dim == want.ff_dim
        && enc.max_len() == cfg.max_seq_len;
    if same {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "encoder shape {}x{} layers/heads, d={}, ff={}, max_len={} differs from the run config",
            have.num_layers,
            have.num_heads,
            have.model_dim,
            have.ff_dim,
            enc.max_len()
        )))
    }
}

/// Builds the vocabulary over event texts and their profile-prefixed forms.
pub fn build_vocab(corpus: &Corpus) -> Vocab {
    let profiled: Vec<String> = corpus
        .iter()
        .map(|e| prepend_profile(&e.text, &corpus.profile(e.user_id, e.t)))
        .collect();
    let texts = corpus.iter().map(|e| e.text.as_str()).chain(profiled.iter().map(String::as_str));
    Vocab::build(texts, &corpus.classes, 1)
}

/// Vocabulary category index for each corpus class, matched by name.
pub fn category_map(corpus: &Corpus, vocab: &Vocab) -> Result<Vec<usize>> {
    let cats: Vec<&str> = (0..vocab.num_categories()).map(|k| vocab.category(k).expect("in range")).collect();
    corpus
        .classes
        .iter()
        .map(|name| {
            let tok = category_token(name);
            cats.iter()
                .position(|c| *c == tok)
                .ok_or_else(|| Error::Config(format!("class {name:?} has no category token in the encoder vocabulary")))
        })
        .collect()
}

/// Tokenized forms of every event, indexed `[user][t]`.
#[derive(Clone, Debug)]
pub struct Sequences {
    pub plain: Vec<Vec<TokenSequence>>,
    pub profiled: Vec<Vec<TokenSequence>>,
    /// Category-prefixed history form; equals `plain` when prepending is off.
    pub history: Vec<Vec<TokenSequence>>,
}

impl Sequences {
    pub fn new(corpus: &Corpus, vocab: &Vocab, max_len: usize, prepend: bool) -> Result<Self> {
        let cats = if prepend { Some(category_map(corpus, vocab)?) } else { None };
        let mut plain = Vec::new();
        let mut profiled = Vec::new();
        let mut history = Vec::new();
        for evs in &corpus.events {
            let mut p = Vec::with_capacity(evs.len());
            let mut pr = Vec::with_capacity(evs.len());
            let mut h = Vec::with_capacity(evs.len());
            for e in evs {
                p.push(tokenize(&e.text, vocab, max_len));
                pr.push(tokenize(&prepend_profile(&e.text, &corpus.profile(e.user_id, e.t)), vocab, max_len));
                h.push(match &cats {
                    Some(map) if e.label_visible_as_history => {
                        tokenize(&prepend_category(&e.text, map[e.label], vocab)?, vocab, max_len)
                    }
                    _ => p.last().expect("pushed").clone(),
                });
            }
            plain.push(p);
            profiled.push(pr);
            history.push(h);
        }
        Ok(Sequences { plain, profiled, history })
    }
}

pub fn class_weights(cfg: &RunConfig, labels: impl IntoIterator<Item = usize>, num_classes: usize) -> ClassWeights {
    if cfg.weighted_loss {
        crate::data::class_frequencies(labels, num_classes)
    } else {
        ClassWeights::uniform(num_classes)
    }
}

/// AdamW with the configured schedule over a known number of steps.
pub struct Optimizer {
    pub lr: f64,
    pub cfg: AdamWConfig,
    pub schedule: Schedule,
    pub step: usize,
    pub total_steps: usize,
}

impl Optimizer {
    pub fn new(run: &RunConfig, lr: f64, total_steps: usize) -> Self {
        Optimizer { lr, cfg: run.optimizer, schedule: run.schedule, step: 0, total_steps: total_steps.max(1) }
    }

    /// Divides accumulated gradients by `weight_sum`, applies one update and
    /// zeroes gradients.
    pub fn apply(&mut self, model: &mut dyn Parameterized, weight_sum: f64) {
        if weight_sum > 0.0 {
            let s = 1.0 / weight_sum;
            model.visit_trainable_mut("", &mut |_, p| p.grad.scale(s));
        }
        let frac = match self.schedule {
            Schedule::Linear => self.step as f64 / self.total_steps as f64,
            Schedule::Constant => 0.0,
        };
        adamw_step(model, self.lr, frac, &self.cfg);
        model.visit_trainable_mut("", &mut |_, p| p.zero_grad());
        self.step += 1;
    }
}

pub fn check_loss(loss: f64, context: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!("loss {loss} during {context}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FitSummary {
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub best_val: f64,
}

/// Runs up to `max_epochs`, keeping the parameters of the best validation
/// epoch and stopping after `patience` epochs without improvement.
/// `model` holds the best parameters on return.
pub fn fit<M, E, V>(model: &mut M, cfg: &RunConfig, mut run_epoch: E, mut validate: V) -> Result<FitSummary>
where
    M: Clone,
    E: FnMut(&mut M, usize) -> Result<f64>,
    V: FnMut(&M) -> Result<f64>,
{
    let mut best = model.clone();
    let mut summary = FitSummary { best_epoch: 0, epochs_run: 0, best_val: f64::NEG_INFINITY };
    let mut stale = 0;
    for epoch in 0..cfg.max_epochs {
        let loss = run_epoch(model, epoch)?;
        let val = validate(model)?;
        summary.epochs_run = epoch + 1;
        info!("epoch {epoch}: train loss {loss:.4}, val acc {val:.4}");
        if val > summary.best_val {
            summary.best_val = val;
            summary.best_epoch = epoch;
            best = model.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    *model = best;
    Ok(summary)
}
