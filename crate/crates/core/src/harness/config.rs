use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{SplitMode, SplitSpec};
use crate::error::{Error, Result};
use crate::history::{PastActivityIndex, StorageMode};
use crate::models::Variant;
use crate::nn::{AdamWConfig, AttentionConfig};

/// What a run trains and evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    Model(Variant),
    /// Most frequent class among the recent history labels; no parameters.
    Majority,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Model(v) => v.name(),
            Method::Majority => "majority",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        if s == "majority" {
            Ok(Method::Majority)
        } else {
            Variant::parse(s).map(Method::Model)
        }
    }

    /// Stream methods run over the chronological stream with a frozen
    /// encoder; the rest are batch methods with a fine-tuned encoder.
    pub fn is_stream(self) -> bool {
        match self {
            Method::Majority => true,
            Method::Model(v) => matches!(v, Variant::QUhMean | Variant::QUhAttn | Variant::Incremental),
        }
    }
}

impl TryFrom<String> for Method {
    type Error = Error;
    fn try_from(s: String) -> Result<Method> {
        Method::parse(&s)
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.name().to_string()
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackDims {
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Linear,
    Constant,
}

/// Supervised encoder warm-up settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WarmupConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Share of warm-up texts that get their category token prepended.
    pub prepend_fraction: f64,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        WarmupConfig { epochs: 10, lr: 3e-3, prepend_fraction: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Row label in comparison tables; defaults to the method name.
    pub name: Option<String>,
    pub method: Method,
    pub model_dim: usize,
    pub encoder: StackDims,
    pub upper: StackDims,
    pub dropout: f64,
    pub max_seq_len: usize,
    pub alpha: f64,
    pub n0: usize,
    pub t0: usize,
    pub batch_histories: usize,
    pub stream_histories: usize,
    pub lr: f64,
    pub schedule: Schedule,
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub weighted_loss: bool,
    pub seed: u64,
    pub prepend_category: bool,
    pub read_index: PastActivityIndex,
    pub classify_pre_update: bool,
    pub storage: StorageMode,
    pub split: SplitSpec,
    /// Split of the pooled stream baselines (`q_uh_mean`, `q_uh_attn`).
    pub pooled_split: SplitMode,
    pub warmup: WarmupConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            name: None,
            method: Method::Model(Variant::Incremental),
            model_dim: 64,
            encoder: StackDims { num_layers: 2, num_heads: 4, ff_dim: 256 },
            upper: StackDims { num_layers: 4, num_heads: 8, ff_dim: 256 },
            dropout: 0.1,
            max_seq_len: 32,
            alpha: 0.1,
            n0: 5,
            t0: 10,
            batch_histories: 5,
            stream_histories: 40,
            lr: 2e-5,
            schedule: Schedule::Linear,
            optimizer: AdamWConfig::default(),
            batch_size: 64,
            max_epochs: 15,
            patience: 2,
            weighted_loss: true,
            seed: 0,
            prepend_category: false,
            read_index: PastActivityIndex::default(),
            classify_pre_update: false,
            storage: StorageMode::default(),
            split: SplitSpec::default(),
            pooled_split: SplitMode::Random,
            warmup: WarmupConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.method.name().to_string())
    }

    pub fn encoder_attention(&self) -> AttentionConfig {
        self.stack(self.encoder)
    }

    pub fn upper_attention(&self) -> AttentionConfig {
        self.stack(self.upper)
    }

    fn stack(&self, s: StackDims) -> AttentionConfig {
        AttentionConfig {
            num_layers: s.num_layers,
            num_heads: s.num_heads,
            model_dim: self.model_dim,
            ff_dim: s.ff_dim,
            dropout_p: self.dropout,
        }
    }

    /// Histories per sample for this run's regime.
    pub fn histories(&self) -> usize {
        if self.method.is_stream() {
            self.stream_histories
        } else {
            self.batch_histories
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        self.encoder_attention().validate()?;
        self.upper_attention().validate()?;
        self.split.validate()?;
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail(format!("alpha {} outside [0,1]", self.alpha));
        }
        if self.n0 == 0 || self.t0 < self.n0 + 1 {
            return fail(format!("need n0 ≥ 1 and t0 ≥ n0+1 (n0={}, t0={})", self.n0, self.t0));
        }
        if self.batch_histories == 0 || self.stream_histories == 0 {
            return fail("history counts must be positive".into());
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return fail("batch_size and max_epochs must be positive".into());
        }
        if self.max_seq_len < 2 {
            return fail(format!("max_seq_len {} too small", self.max_seq_len));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.warmup.lr > 0.0) {
            return fail("learning rates must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.warmup.prepend_fraction) {
            return fail("warmup.prepend_fraction outside [0,1]".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        RunConfig::from_json(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 over the compact JSON form.
    pub fn hash(&self) -> String {
        let compact = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(compact))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.upper.num_layers, 4);
        assert_eq!(cfg.upper.num_heads, 8);
        assert_eq!((cfg.alpha, cfg.lr, cfg.max_epochs, cfg.dropout), (0.1, 2e-5, 15, 0.1));
        assert_eq!((cfg.batch_histories, cfg.stream_histories), (5, 40));
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg = RunConfig::from_json(r#"{"method": "q_up_uh_attn", "seed": 4}"#).unwrap();
        assert_eq!(cfg.method, Method::Model(Variant::QUpUhAttn));
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.n0, 5);
        assert_ne!(cfg.hash(), RunConfig::default().hash());
        assert!(RunConfig::from_json(r#"{"method": "nope"}"#).is_err());
        assert!(RunConfig::from_json(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        for bad in [
            RunConfig { alpha: 1.5, ..Default::default() },
            RunConfig { t0: 5, ..Default::default() },
            RunConfig { model_dim: 30, ..Default::default() },
            RunConfig { batch_size: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn method_regimes() {
        assert!(Method::Majority.is_stream());
        assert!(Method::Model(Variant::Incremental).is_stream());
        assert!(!Method::Model(Variant::QUpUhMean).is_stream());
        assert_eq!(Method::parse("majority").unwrap(), Method::Majority);
    }
}
