//! Events, the synthetic drifting-interest corpus, JSONL ingestion,
//! chronological dataset construction and splits.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ClassWeights;

/// One timestamped interaction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Event {
    pub user_id: usize,
    pub t: usize,
    pub text: String,
    pub label: usize,
    pub label_visible_as_history: bool,
    pub created_utc: i64,
}

/// Events grouped per user, each user's list indexed by `t = 0, 1, ...`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub users: Vec<String>,
    pub classes: Vec<String>,
    pub events: Vec<Vec<Event>>,
}

impl Corpus {
    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Longest per-user history.
    pub fn time_span(&self) -> usize {
        self.events.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.events.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn event(&self, user: usize, t: usize) -> &Event {
        &self.events[user][t]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Event> {
        self.events.iter().flatten()
    }

    /// Static key-value profile of the user at the time of event `t`.
    pub fn profile(&self, user: usize, t: usize) -> Vec<(String, String)> {
        let hour = self.events[user][t].created_utc.div_euclid(3600).rem_euclid(24);
        vec![("author".into(), self.users[user].clone()), ("time".into(), format!("h{hour:02}"))]
    }

    /// Checks the per-user contiguity and label-range invariants.
    pub fn validate(&self) -> Result<()> {
        if self.events.len() != self.users.len() {
            return Err(Error::Config("events/users length mismatch".into()));
        }
        for (u, evs) in self.events.iter().enumerate() {
            for (t, e) in evs.iter().enumerate() {
                if e.user_id != u || e.t != t {
                    return Err(Error::Config(format!("event ({}, {}) stored at ({u}, {t})", e.user_id, e.t)));
                }
                if e.label >= self.classes.len() {
                    return Err(Error::Index(format!("label {} of {}", e.label, self.classes.len())));
                }
            }
        }
        Ok(())
    }
}

/// Removes URL tokens and non-ASCII characters, collapses whitespace, trims.
pub fn normalize(text: &str) -> String {
    let ascii: String = text.chars().filter(char::is_ascii).collect();
    let mut out = String::with_capacity(ascii.len());
    for tok in ascii.split_ascii_whitespace().filter(|t| !is_url(t)) {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(tok);
    }
    out
}

/// `scheme://...` where scheme is `[A-Za-z][A-Za-z0-9+.-]*`.
fn is_url(tok: &str) -> bool {
    match tok.find("://") {
        Some(pos) if pos > 0 => {
            let scheme = &tok[..pos];
            let mut chars = scheme.chars();
            chars.next().is_some_and(|c| c.is_ascii_alphabetic())
                && chars.all(|c| c.is_ascii_alphanumeric() || "+.-".contains(c))
        }
        _ => false,
    }
}

const CLASS_NAMES: [&str; 16] = [
    "anime", "art", "books", "cars", "cooking", "fitness", "gaming", "history", "movies", "music", "news",
    "pets", "science", "space", "sports", "travel",
];

/// Class names in sorted order, so that ingesting a generated corpus maps
/// names back to the same indices.
pub fn synthetic_class_names(num_classes: usize) -> Vec<String> {
    if num_classes <= CLASS_NAMES.len() {
        CLASS_NAMES[..num_classes].iter().map(|s| s.to_string()).collect()
    } else {
        (0..num_classes).map(|k| format!("topic{k:03}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_users: usize,
    pub events_per_user: usize,
    pub num_classes: usize,
    /// Events between interest shifts; `None` disables drift.
    pub topic_drift_period: Option<usize>,
    pub topics_per_user: usize,
    pub vocab_per_topic: usize,
    pub noise_rate: f64,
    pub seed: u64,
    /// Fraction of each topic vocabulary shared with the next topic.
    pub topic_overlap: f64,
    /// Probability that a token is drawn from the event's topic vocabulary
    /// rather than the generic pool.
    pub topic_token_rate: f64,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub generic_vocab: usize,
    /// Probability mass on the user's current focus topic.
    pub focus_weight: f64,
    /// Class popularity ∝ (k+1)^(−exponent); 0 gives balanced classes.
    pub imbalance_exponent: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_users: 100,
            events_per_user: 40,
            num_classes: 8,
            topic_drift_period: Some(12),
            topics_per_user: 3,
            vocab_per_topic: 30,
            noise_rate: 0.05,
            seed: 0,
            topic_overlap: 0.1,
            topic_token_rate: 0.07,
            min_tokens: 4,
            max_tokens: 10,
            generic_vocab: 200,
            focus_weight: 0.8,
            imbalance_exponent: 0.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Spec(m));
        if self.num_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.topics_per_user == 0 || self.topics_per_user > self.num_classes {
            return fail(format!("topics_per_user {} not in [1, {}]", self.topics_per_user, self.num_classes));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return fail(format!("noise_rate {} outside [0,1)", self.noise_rate));
        }
        if self.topic_drift_period == Some(0) {
            return fail("topic_drift_period must be positive".into());
        }
        if self.vocab_per_topic == 0 || self.generic_vocab == 0 {
            return fail("vocabularies must be nonempty".into());
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return fail(format!("token range [{}, {}] invalid", self.min_tokens, self.max_tokens));
        }
        for (name, v) in [
            ("topic_overlap", self.topic_overlap),
            ("topic_token_rate", self.topic_token_rate),
            ("focus_weight", self.focus_weight),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} {v} outside [0,1]"));
            }
        }
        Ok(())
    }
}

fn topic_vocabularies(spec: &SyntheticSpec, names: &[String]) -> Vec<Vec<String>> {
    let own: Vec<Vec<String>> = names
        .iter()
        .map(|n| (0..spec.vocab_per_topic).map(|j| format!("{n}{j}")).collect())
        .collect();
    let shared = ((spec.vocab_per_topic as f64) * spec.topic_overlap).round() as usize;
    let c = names.len();
    (0..c)
        .map(|k| {
            let mut v = own[k].clone();
            let next = &own[(k + 1) % c];
            let m = v.len();
            for s in 0..shared.min(m) {
                v[m - 1 - s] = next[s].clone();
            }
            v
        })
        .collect()
}

fn weighted_pick<R: Rng>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return i;
        }
        x -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Draws a popularity-weighted class not in `exclude`.
fn pick_class<R: Rng>(rng: &mut R, popularity: &[f64], exclude: &[usize]) -> usize {
    let w: Vec<f64> = popularity
        .iter()
        .enumerate()
        .map(|(k, p)| if exclude.contains(&k) { 0.0 } else { *p })
        .collect();
    weighted_pick(rng, &w)
}

/// Generates a corpus whose users hold drifting topic interests.
///
/// Each user keeps `topics_per_user` topics with one focus topic carrying
/// `focus_weight`; every `topic_drift_period` events the focus moves, either
/// to another held topic or to a freshly adopted one.
pub fn generate(spec: &SyntheticSpec) -> Result<Corpus> {
    spec.validate()?;
    let classes = synthetic_class_names(spec.num_classes);
    let vocab = topic_vocabularies(spec, &classes);
    let generic: Vec<String> = (0..spec.generic_vocab).map(|j| format!("w{j}")).collect();
    let popularity: Vec<f64> = (0..spec.num_classes)
        .map(|k| ((k + 1) as f64).powf(-spec.imbalance_exponent))
        .collect();
    let users: Vec<String> = (0..spec.num_users).map(|i| format!("u{i:04}")).collect();
    let mut events = Vec::with_capacity(spec.num_users);
    for user in 0..spec.num_users {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9e37_79b9).wrapping_add(user as u64));
        let mut topics: Vec<usize> = Vec::with_capacity(spec.topics_per_user);
        while topics.len() < spec.topics_per_user {
            let k = pick_class(&mut rng, &popularity, &topics);
            topics.push(k);
        }
        let mut focus = 0usize;
        let mut time = 1_561_939_200i64 + (user as i64) * 37;
        let mut evs = Vec::with_capacity(spec.events_per_user);
        for t in 0..spec.events_per_user {
            if let Some(p) = spec.topic_drift_period {
                if t > 0 && t % p == 0 {
                    let adopt = topics.len() == 1 || (topics.len() < spec.num_classes && rng.gen_bool(0.5));
                    if adopt && topics.len() < spec.num_classes {
                        let slot = if topics.len() == 1 {
                            0
                        } else {
                            let others: Vec<usize> = (0..topics.len()).filter(|&s| s != focus).collect();
                            *others.choose(&mut rng).expect("nonempty")
                        };
                        topics[slot] = pick_class(&mut rng, &popularity, &topics);
                        focus = slot;
                    } else if topics.len() > 1 {
                        let others: Vec<usize> = (0..topics.len()).filter(|&s| s != focus).collect();
                        focus = *others.choose(&mut rng).expect("nonempty");
                    }
                }
            }
            let label = if rng.gen::<f64>() < spec.noise_rate {
                rng.gen_range(0..spec.num_classes)
            } else if topics.len() == 1 {
                topics[0]
            } else {
                let rest = (1.0 - spec.focus_weight) / (topics.len() - 1) as f64;
                let w: Vec<f64> = (0..topics.len()).map(|s| if s == focus { spec.focus_weight } else { rest }).collect();
                topics[weighted_pick(&mut rng, &w)]
            };
            let len = rng.gen_range(spec.min_tokens..=spec.max_tokens);
            let words: Vec<&str> = (0..len)
                .map(|_| {
                    if rng.gen::<f64>() < spec.topic_token_rate {
                        vocab[label].choose(&mut rng).expect("nonempty").as_str()
                    } else {
                        generic.choose(&mut rng).expect("nonempty").as_str()
                    }
                })
                .collect();
            time += rng.gen_range(600..7200);
            evs.push(Event {
                user_id: user,
                t,
                text: words.join(" "),
                label,
                label_visible_as_history: true,
                created_utc: time,
            });
        }
        events.push(evs);
    }
    Ok(Corpus { users, classes, events })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct JsonlRecord {
    user_id: String,
    created_utc: i64,
    body: String,
    subreddit: String,
}

/// Writes one JSON object per event, users in order, each user's events
/// chronological.
pub fn write_jsonl<W: Write>(corpus: &Corpus, mut out: W) -> Result<()> {
    for e in corpus.iter() {
        let rec = JsonlRecord {
            user_id: corpus.users[e.user_id].clone(),
            created_utc: e.created_utc,
            body: e.text.clone(),
            subreddit: corpus.classes[e.label].clone(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub events: usize,
    pub malformed: usize,
    pub missing_field: usize,
}

/// Reads the JSONL interchange format. Users and classes are mapped to
/// dense indices in sorted-name order; each user's events are sorted by
/// `created_utc` (stable) and re-indexed from 0. Bodies are normalised.
pub fn ingest_reader<R: BufRead>(reader: R) -> Result<(Corpus, IngestReport)> {
    let mut report = IngestReport::default();
    let mut raw: Vec<JsonlRecord> = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(_) => {
                report.malformed += 1;
                continue;
            }
        };
        match serde_json::from_value::<JsonlRecord>(value) {
            Ok(r) => raw.push(r),
            Err(_) => report.missing_field += 1,
        }
    }
    let user_names: Vec<String> = {
        let mut v: Vec<String> = raw.iter().map(|r| r.user_id.clone()).collect();
        v.sort();
        v.dedup();
        v
    };
    let classes: Vec<String> = {
        let mut v: Vec<String> = raw.iter().map(|r| r.subreddit.clone()).collect();
        v.sort();
        v.dedup();
        v
    };
    let user_idx: BTreeMap<&str, usize> = user_names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let class_idx: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let mut per_user: Vec<Vec<&JsonlRecord>> = vec![Vec::new(); user_names.len()];
    for r in &raw {
        per_user[user_idx[r.user_id.as_str()]].push(r);
    }
    let mut events = Vec::with_capacity(per_user.len());
    for (u, mut recs) in per_user.into_iter().enumerate() {
        recs.sort_by_key(|r| r.created_utc);
        events.push(
            recs.into_iter()
                .enumerate()
                .map(|(t, r)| Event {
                    user_id: u,
                    t,
                    text: normalize(&r.body),
                    label: class_idx[r.subreddit.as_str()],
                    label_visible_as_history: true,
                    created_utc: r.created_utc,
                })
                .collect::<Vec<_>>(),
        );
    }
    report.events = raw.len();
    Ok((Corpus { users: user_names, classes, events }, report))
}

pub fn ingest_jsonl(path: &std::path::Path) -> Result<(Corpus, IngestReport)> {
    let f = std::fs::File::open(path)?;
    ingest_reader(std::io::BufReader::new(f))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamSample {
    pub user: usize,
    pub t: usize,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamDataset {
    pub samples: Vec<StreamSample>,
    /// Users with at least `t0` events (they can initialise a store).
    pub users: Vec<usize>,
    pub excluded_users: usize,
}

/// One `(i, t, y)` sample per event with `t ≥ t0`, ordered by `t` and then
/// user. Users with fewer than `t0 + 1` events contribute no samples.
pub fn build_stream_dataset(corpus: &Corpus, t0: usize, n0: usize) -> Result<StreamDataset> {
    if t0 < n0 + 1 {
        return Err(Error::Config(format!("t0 {t0} < n0 + 1 = {}", n0 + 1)));
    }
    let mut excluded = 0;
    let mut users = Vec::new();
    for (u, evs) in corpus.events.iter().enumerate() {
        if evs.len() >= t0 {
            users.push(u);
        }
        if evs.len() < t0 + 1 {
            excluded += 1;
        }
    }
    if excluded > 0 {
        warn!("{excluded} users have fewer than t0+1={} events and yield no stream samples", t0 + 1);
    }
    let mut samples: Vec<StreamSample> = corpus
        .events
        .iter()
        .flat_map(|evs| evs.iter().skip(t0))
        .map(|e| StreamSample { user: e.user_id, t: e.t, label: e.label })
        .collect();
    samples.sort_by_key(|s| (s.t, s.user));
    Ok(StreamDataset { samples, users, excluded_users: excluded })
}

/// An event with its preceding history, most recent first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HistorySample {
    pub user: usize,
    pub t: usize,
    pub label: usize,
    pub history: Vec<usize>,
}

/// Samples for every event at `t ≥ from_t` with at least `min_history`
/// prior events, each carrying up to `max_history` of them in reverse
/// chronological order. Ordered by `t` then user.
pub fn build_history_samples(
    corpus: &Corpus,
    from_t: usize,
    min_history: usize,
    max_history: usize,
) -> Vec<HistorySample> {
    let mut out: Vec<HistorySample> = corpus
        .iter()
        .filter(|e| e.t >= from_t && e.t >= min_history.max(1))
        .map(|e| HistorySample {
            user: e.user_id,
            t: e.t,
            label: e.label,
            history: (1..=max_history.min(e.t)).map(|k| e.t - k).collect(),
        })
        .collect();
    out.sort_by_key(|s| (s.t, s.user));
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train: 0.5, val: 0.25, test: 0.25 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Seeded shuffle over samples.
    #[default]
    Random,
    /// Earliest samples train, then validation, then test.
    Chronological,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {parts:?} must be in [0,1] and sum to 1")));
        }
        Ok(())
    }

    /// Splits `0..n` into train/val/test index lists.
    pub fn split(&self, n: usize, mode: SplitMode, seed: u64) -> Result<Split> {
        self.validate()?;
        let mut idx: Vec<usize> = (0..n).collect();
        if mode == SplitMode::Random {
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        let n_train = ((n as f64) * self.train).round() as usize;
        let n_val = (((n as f64) * self.val).round() as usize).min(n - n_train.min(n));
        let n_train = n_train.min(n);
        let val = idx[n_train..n_train + n_val].to_vec();
        let test = idx[n_train + n_val..].to_vec();
        idx.truncate(n_train);
        Ok(Split { train: idx, val, test })
    }
}

/// Inverse-frequency class weights over the given labels.
pub fn class_frequencies<I: IntoIterator<Item = usize>>(labels: I, num_classes: usize) -> ClassWeights {
    let mut counts = vec![0usize; num_classes];
    for y in labels {
        counts[y] += 1;
    }
    ClassWeights::from_counts(&counts)
}
