//! Training and evaluation loops, checkpoints, metrics and comparison
//! tables.

pub mod batch;
pub mod checkpoint;
pub mod common;
pub mod config;
pub mod metrics;
pub mod pretrain;
pub mod stream;
pub mod verify;

pub use batch::{train_batch, BatchModel};
pub use checkpoint::{Checkpoint, CheckpointHeader, CheckpointKind};
pub use common::EncoderBundle;
pub use config::{Method, RunConfig, Schedule, StackDims, WarmupConfig};
pub use metrics::{compare, to_csv, to_markdown, ComparisonRow, MetricsReport, Tally};
pub use pretrain::{pretrain_encoder, WarmupReport};
pub use stream::{encoder_from_checkpoint, train_stream};

use crate::data::Corpus;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: MetricsReport,
    pub checkpoint: Checkpoint,
}

/// Trains `cfg.method` on `corpus`. Stream methods require `encoder`; batch
/// methods fine-tune it when given and start from scratch otherwise.
pub fn run(cfg: &RunConfig, corpus: &Corpus, encoder: Option<&EncoderBundle>) -> Result<RunOutput> {
    if cfg.method.is_stream() {
        let bundle = encoder.ok_or_else(|| Error::Config(format!("{} needs a pretrained encoder", cfg.method)))?;
        train_stream(cfg, corpus, bundle)
    } else {
        train_batch(cfg, corpus, encoder)
    }
}

/// Re-evaluates a trained checkpoint on `corpus` with the split it was
/// trained with.
pub fn evaluate_checkpoint(ck: &Checkpoint, corpus: &Corpus) -> Result<MetricsReport> {
    if ck.header.kind != CheckpointKind::Model {
        return Err(Error::Checkpoint("not a trained-model checkpoint".into()));
    }
    if ck.header.classes != corpus.classes {
        return Err(Error::Config("corpus classes differ from the checkpoint's".into()));
    }
    let cfg = &ck.header.config;
    if cfg.method.is_stream() {
        stream::evaluate_stream_checkpoint(ck, corpus)
    } else {
        let (model, vocab) = batch::batch_model_from_checkpoint(ck)?;
        let data = batch::BatchData::new(cfg, corpus, &vocab)?;
        let test = batch::evaluate_batch(&model, &data, &data.split.test, corpus.num_classes())?;
        batch::make_report(cfg, &test, &corpus.classes, common::FitSummary::default())
    }
}

pub fn encoder_checkpoint(cfg: &RunConfig, bundle: &EncoderBundle, classes: &[String]) -> Checkpoint {
    Checkpoint {
        header: CheckpointHeader {
            kind: CheckpointKind::Encoder,
            config: cfg.clone(),
            vocab: bundle.vocab.tokens().to_vec(),
            classes: classes.to_vec(),
            store: None,
            store_users: vec![],
        },
        blobs: checkpoint::param_blobs(&bundle.encoder, "encoder"),
    }
}
