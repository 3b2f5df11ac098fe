//! Per-user history tensors: `A` holds raw history embeddings, `B` holds
//! accumulated profile vectors. Reads and writes follow a strict
//! chronological protocol per user.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StorageMode {
    /// Materialise every slot `0..T`.
    #[default]
    Full,
    /// Keep only the last `n0 + 1` slots per user.
    Ring,
}

/// Which accumulated slot is fed to the fusion transformer at step `t`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PastActivityIndex {
    /// `B[i][t − n0 − 1]`
    #[default]
    Lagged,
    /// `B[i][t − 1]`
    Latest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreConfig {
    pub num_users: usize,
    pub time_span: usize,
    pub dim: usize,
    pub t0: usize,
    pub n0: usize,
    pub alpha: f64,
    #[serde(default)]
    pub storage: StorageMode,
    #[serde(default)]
    pub read_index: PastActivityIndex,
}

impl StoreConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0,1]", self.alpha)));
        }
        if self.n0 == 0 {
            return Err(Error::Config("n0 must be at least 1".into()));
        }
        if self.t0 < self.n0 + 1 {
            return Err(Error::Config(format!("t0 {} < n0 + 1 = {}", self.t0, self.n0 + 1)));
        }
        if self.t0 > self.time_span {
            return Err(Error::Config(format!("t0 {} beyond time span {}", self.t0, self.time_span)));
        }
        if self.dim == 0 {
            return Err(Error::Config("embedding dim must be positive".into()));
        }
        Ok(())
    }
}

/// The inputs for one stream step.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowView {
    pub user: usize,
    pub t: usize,
    /// `A[i][t−n0 ..= t−1]`, ascending time.
    pub history: Matrix,
    pub past_activity: Vec<f64>,
    /// `B[i][t−1]` before this step's update.
    pub latest: Vec<f64>,
}

/// `α·u + (1−α)·old`, with α = 0 and α = 1 returning `old` and `u` exactly.
pub fn momentum_blend(alpha: f64, u: &[f64], old: &[f64]) -> Vec<f64> {
    if alpha == 0.0 {
        old.to_vec()
    } else if alpha == 1.0 {
        u.to_vec()
    } else {
        u.iter().zip(old).map(|(x, b)| alpha * x + (1.0 - alpha) * b).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryStore {
    cfg: StoreConfig,
    slots: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    /// running Σ A[i][0..filled] per user, for prefix means
    sums: Vec<f64>,
    /// A and B are defined for `j < filled[i]`
    filled: Vec<usize>,
    cursor: Vec<usize>,
    pending: Vec<Option<usize>>,
}

impl HistoryStore {
    pub fn new(cfg: StoreConfig) -> Result<Self> {
        cfg.validate()?;
        let slots = match cfg.storage {
            StorageMode::Full => cfg.time_span,
            StorageMode::Ring => cfg.n0 + 1,
        };
        let n = cfg.num_users;
        let d = cfg.dim;
        Ok(HistoryStore {
            slots,
            a: vec![0.0; n * slots * d],
            b: vec![0.0; n * slots * d],
            sums: vec![0.0; n * d],
            filled: vec![0; n],
            cursor: vec![cfg.t0 - 1; n],
            pending: vec![None; n],
            cfg,
        })
    }

    pub fn config(&self) -> &StoreConfig {
        &self.cfg
    }

    pub fn num_users(&self) -> usize {
        self.cfg.num_users
    }

    pub fn cursor(&self, user: usize) -> usize {
        self.cursor[user]
    }

    pub fn filled(&self, user: usize) -> usize {
        self.filled[user]
    }

    fn offset(&self, user: usize, j: usize) -> usize {
        (user * self.slots + j % self.slots) * self.cfg.dim
    }

    fn resident(&self, user: usize, j: usize) -> bool {
        j < self.filled[user] && j + self.slots >= self.filled[user]
    }

    pub fn a(&self, user: usize, j: usize) -> Option<&[f64]> {
        (user < self.num_users() && self.resident(user, j)).then(|| {
            let o = self.offset(user, j);
            &self.a[o..o + self.cfg.dim]
        })
    }

    pub fn b(&self, user: usize, j: usize) -> Option<&[f64]> {
        (user < self.num_users() && self.resident(user, j)).then(|| {
            let o = self.offset(user, j);
            &self.b[o..o + self.cfg.dim]
        })
    }

    /// Loads each user's leading history embeddings: `A[i][j]` is the j-th
    /// vector and `B[i][j]` the mean of `A[i][0..=j]`. Every user needs at
    /// least `t0` vectors.
    pub fn initialize(&mut self, encoded: &[Vec<Vec<f64>>]) -> Result<()> {
        if encoded.len() != self.num_users() {
            return Err(Error::Shape(format!("{} users given, store has {}", encoded.len(), self.num_users())));
        }
        for (i, hist) in encoded.iter().enumerate() {
            if hist.len() < self.cfg.t0 {
                return Err(Error::InsufficientHistory { user: i, have: hist.len(), need: self.cfg.t0 });
            }
            if hist.len() > self.cfg.time_span {
                return Err(Error::Shape(format!("user {i}: {} vectors beyond time span", hist.len())));
            }
            self.check_vectors(hist)?;
        }
        for i in 0..self.num_users() {
            self.filled[i] = 0;
            self.cursor[i] = self.cfg.t0 - 1;
            self.pending[i] = None;
            self.sums[i * self.cfg.dim..(i + 1) * self.cfg.dim].fill(0.0);
        }
        for (i, hist) in encoded.iter().enumerate() {
            for v in hist {
                self.push(i, v);
            }
        }
        Ok(())
    }

    fn check_vectors(&self, vs: &[Vec<f64>]) -> Result<()> {
        for v in vs {
            if v.len() != self.cfg.dim {
                return Err(Error::Shape(format!("vector of {} vs dim {}", v.len(), self.cfg.dim)));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NumericDomain("history embedding".into()));
            }
        }
        Ok(())
    }

    fn push(&mut self, user: usize, v: &[f64]) {
        let d = self.cfg.dim;
        let j = self.filled[user];
        let sums = &mut self.sums[user * d..(user + 1) * d];
        for (s, x) in sums.iter_mut().zip(v) {
            *s += x;
        }
        let n = (j + 1) as f64;
        let mean: Vec<f64> = sums.iter().map(|s| s / n).collect();
        let o = self.offset(user, j);
        self.a[o..o + d].copy_from_slice(v);
        self.b[o..o + d].copy_from_slice(&mean);
        self.filled[user] = j + 1;
    }

    /// Records the history embedding of the user's next event, seeding its
    /// accumulated slot with the running prefix mean.
    pub fn append(&mut self, user: usize, v: &[f64]) -> Result<()> {
        self.check_user(user)?;
        if self.filled[user] >= self.cfg.time_span {
            return Err(Error::Index(format!("user {user} already holds {} slots", self.cfg.time_span)));
        }
        self.check_vectors(std::slice::from_ref(&v.to_vec()))?;
        self.push(user, v);
        Ok(())
    }

    fn check_user(&self, user: usize) -> Result<()> {
        if user >= self.num_users() {
            return Err(Error::Index(format!("user {user} of {}", self.num_users())));
        }
        Ok(())
    }

    pub fn read_window(&mut self, user: usize, t: usize) -> Result<WindowView> {
        self.check_user(user)?;
        let expected = self.cursor[user] + 1;
        if t != expected {
            return Err(Error::Chronology { user, expected, got: t });
        }
        if t >= self.cfg.time_span {
            return Err(Error::Index(format!("t={t} beyond time span {}", self.cfg.time_span)));
        }
        let n0 = self.cfg.n0;
        let past = match self.cfg.read_index {
            PastActivityIndex::Lagged => t.checked_sub(n0 + 1),
            PastActivityIndex::Latest => t.checked_sub(1),
        }
        .ok_or(Error::WindowUnderflow { t, n0 })?;
        if t < n0 {
            return Err(Error::WindowUnderflow { t, n0 });
        }
        if !(self.resident(user, t - n0) && self.resident(user, t - 1) && self.resident(user, past)) {
            return Err(Error::Protocol(format!(
                "user {user}: slots for t={t} not available (filled {})",
                self.filled[user]
            )));
        }
        let d = self.cfg.dim;
        let mut history = Matrix::zeros(n0, d);
        for (r, j) in (t - n0..t).enumerate() {
            history.row_mut(r).copy_from_slice(self.a(user, j).expect("resident"));
        }
        let view = WindowView {
            user,
            t,
            history,
            past_activity: self.b(user, past).expect("resident").to_vec(),
            latest: self.b(user, t - 1).expect("resident").to_vec(),
        };
        self.pending[user] = Some(t);
        Ok(view)
    }

    /// `B[i][t−1] ← α·u + (1−α)·B[i][t−1]`; advances the user's cursor to `t`.
    pub fn momentum_update(&mut self, user: usize, t: usize, u_profile: &[f64]) -> Result<Vec<f64>> {
        self.check_user(user)?;
        if self.pending[user] != Some(t) {
            return Err(Error::Protocol(format!("momentum_update({user}, {t}) without matching read_window")));
        }
        if u_profile.len() != self.cfg.dim {
            return Err(Error::Shape(format!("u_profile of {} vs dim {}", u_profile.len(), self.cfg.dim)));
        }
        if u_profile.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericDomain("u_profile".into()));
        }
        let o = self.offset(user, t - 1);
        let d = self.cfg.dim;
        let new = momentum_blend(self.cfg.alpha, u_profile, &self.b[o..o + d]);
        self.b[o..o + d].copy_from_slice(&new);
        self.cursor[user] = t;
        self.pending[user] = None;
        Ok(new)
    }

    /// CRC32 over every stored value and cursor.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for v in self.a.iter().chain(&self.b).chain(&self.sums) {
            h.update(&v.to_bits().to_le_bytes());
        }
        for (&f, &c) in self.filled.iter().zip(&self.cursor) {
            h.update(&(f as u64).to_le_bytes());
            h.update(&(c as u64).to_le_bytes());
        }
        for p in &self.pending {
            h.update(&p.map_or(u64::MAX, |t| t as u64).to_le_bytes());
        }
        h.finalize()
    }

    /// Named raw arrays for checkpointing.
    pub fn to_blobs(&self) -> Vec<(String, Vec<f64>)> {
        vec![
            ("store.a".into(), self.a.clone()),
            ("store.b".into(), self.b.clone()),
            ("store.sums".into(), self.sums.clone()),
            ("store.cursor".into(), self.cursor.iter().map(|&c| c as f64).collect()),
            ("store.filled".into(), self.filled.iter().map(|&c| c as f64).collect()),
        ]
    }

    pub fn from_blobs(cfg: StoreConfig, blobs: &[(String, Vec<f64>)]) -> Result<Self> {
        let mut store = HistoryStore::new(cfg)?;
        let get = |name: &str, len: usize| -> Result<&Vec<f64>> {
            let v = blobs
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, v)| v)
                .ok_or_else(|| Error::Checkpoint(format!("missing blob {name}")))?;
            if v.len() != len {
                return Err(Error::Checkpoint(format!("blob {name}: {} values, expected {len}", v.len())));
            }
            Ok(v)
        };
        let n = store.num_users();
        store.a = get("store.a", store.a.len())?.clone();
        store.b = get("store.b", store.b.len())?.clone();
        store.sums = get("store.sums", store.sums.len())?.clone();
        store.cursor = get("store.cursor", n)?.iter().map(|&c| c as usize).collect();
        store.filled = get("store.filled", n)?.iter().map(|&c| c as usize).collect();
        Ok(store)
    }
}
