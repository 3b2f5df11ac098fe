//! Whitespace tokenizer, vocabulary with category tokens, and a small
//! transformer text encoder whose first-token output is the sequence
//! embedding.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::layers::normal_init;
use crate::nn::param::{join, Param, Parameterized};
use crate::nn::{AttentionConfig, Mode, TransformerEncoder};
use crate::nn::transformer::TransformerCache;
use crate::tensor::Matrix;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
const CATEGORY_PREFIX: &str = "<cat_";

pub fn category_token(class_name: &str) -> String {
    format!("{CATEGORY_PREFIX}{class_name}>")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    /// Token id of each class's category token, in class order.
    categories: Vec<usize>,
}

impl Vocab {
    pub const PAD_ID: usize = 0;
    pub const UNK_ID: usize = 1;
    pub const CLS_ID: usize = 2;
    pub const SEP_ID: usize = 3;

    /// Specials, then one category token per class, then every corpus token
    /// (lowercased) seen at least `min_freq` times, sorted.
    pub fn build<'a, I>(texts: I, class_names: &[String], min_freq: usize) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            for piece in t.split_ascii_whitespace() {
                *counts.entry(piece.to_ascii_lowercase()).or_default() += 1;
            }
        }
        let mut tokens: Vec<String> = [PAD, UNK, CLS, SEP].iter().map(|s| s.to_string()).collect();
        tokens.extend(class_names.iter().map(|c| category_token(c)));
        let reserved: std::collections::HashSet<String> = tokens.iter().cloned().collect();
        tokens.extend(
            counts
                .into_iter()
                .filter(|(tok, c)| *c >= min_freq.max(1) && !reserved.contains(tok))
                .map(|(tok, _)| tok),
        );
        Vocab::from_tokens(tokens).expect("constructed vocabulary is valid")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 4 || tokens[..4] != [PAD, UNK, CLS, SEP] {
            return Err(Error::Config("vocabulary must start with [PAD] [UNK] [CLS] [SEP]".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        let mut categories = Vec::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Config(format!("invalid token at line {i}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate token {t:?}")));
            }
            if t.starts_with(CATEGORY_PREFIX) && t.ends_with('>') {
                categories.push(i);
            }
        }
        Ok(Vocab { tokens, index, categories })
    }

    /// One token per line; the id is the zero-based line number.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Vocab::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Vocab::from_text(&fs::read_to_string(path)?)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    /// Text of the category token for class `class_id`.
    pub fn category(&self, class_id: usize) -> Result<&str> {
        self.categories
            .get(class_id)
            .map(|&i| self.tokens[i].as_str())
            .ok_or_else(|| Error::Index(format!("class {class_id} has no category token")))
    }

    /// Id for one whitespace piece: exact match for reserved tokens,
    /// otherwise lowercased lookup, falling back to UNK.
    fn lookup_piece(&self, piece: &str) -> usize {
        if let Some(&i) = self.index.get(piece) {
            if i < 4 || self.categories.binary_search(&i).is_ok() {
                return i;
            }
        }
        self.index.get(&piece.to_ascii_lowercase()).copied().unwrap_or(Self::UNK_ID)
    }
}

/// Token ids beginning with CLS; positions past `valid_len` are PAD.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<usize>,
    valid_len: usize,
}

impl TokenSequence {
    pub fn from_ids(ids: Vec<usize>) -> Result<Self> {
        if ids.first() != Some(&Vocab::CLS_ID) {
            return Err(Error::Config("token sequence must start with [CLS]".into()));
        }
        let valid_len = ids.len();
        Ok(TokenSequence { ids, valid_len })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn valid_len(&self) -> usize {
        self.valid_len
    }

    /// Pads with PAD up to `len`; padded positions are masked as keys.
    pub fn padded(&self, len: usize) -> TokenSequence {
        let mut ids = self.ids.clone();
        ids.resize(len.max(ids.len()), Vocab::PAD_ID);
        TokenSequence { ids, valid_len: self.valid_len }
    }

    pub fn key_mask(&self) -> Vec<bool> {
        (0..self.ids.len()).map(|i| i < self.valid_len).collect()
    }
}

/// Lowercasing whitespace tokenizer; CLS first, truncated to `max_len`.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> TokenSequence {
    let mut ids = vec![Vocab::CLS_ID];
    ids.extend(
        text.split_ascii_whitespace()
            .take(max_len.saturating_sub(1))
            .map(|p| vocab.lookup_piece(p)),
    );
    let valid_len = ids.len();
    TokenSequence { ids, valid_len }
}

/// `"k1 v1 [SEP] k2 v2 [SEP] text"`, keys in sorted order.
pub fn prepend_profile<K: AsRef<str>, V: AsRef<str>>(text: &str, profile: &[(K, V)]) -> String {
    if profile.is_empty() {
        return text.to_string();
    }
    let mut pairs: Vec<(&str, &str)> = profile.iter().map(|(k, v)| (k.as_ref(), v.as_ref())).collect();
    pairs.sort();
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(k);
        out.push(' ');
        out.push_str(v);
        out.push(' ');
        out.push_str(SEP);
        out.push(' ');
    }
    out.push_str(text);
    out
}

/// `"<cat_Name> text"` using the class's vocabulary token.
pub fn prepend_category(text: &str, class_id: usize, vocab: &Vocab) -> Result<String> {
    let tok = vocab.category(class_id)?;
    Ok(if text.is_empty() { tok.to_string() } else { format!("{tok} {text}") })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel {
    pub token_embedding: Param,
    pub transformer: TransformerEncoder,
    pub frozen: bool,
}

#[derive(Clone, Debug)]
pub struct EncodeCache {
    ids: Vec<usize>,
    inner: TransformerCache,
    seq_len: usize,
}

impl EncoderModel {
    pub fn new<R: Rng>(rng: &mut R, vocab_size: usize, cfg: AttentionConfig, max_len: usize) -> Result<Self> {
        let token_embedding = Param::new(normal_init(rng, vocab_size, cfg.model_dim, 0.1));
        let transformer = TransformerEncoder::new(rng, cfg, max_len)?;
        Ok(EncoderModel { token_embedding, transformer, frozen: false })
    }

    pub fn dim(&self) -> usize {
        self.transformer.dim()
    }

    pub fn vocab_size(&self) -> usize {
        self.token_embedding.value.rows()
    }

    pub fn max_len(&self) -> usize {
        self.transformer.max_positions()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    fn embed(&self, seq: &TokenSequence) -> Result<Matrix> {
        let d = self.dim();
        let mut x = Matrix::zeros(seq.len(), d);
        for (r, &id) in seq.ids().iter().enumerate() {
            if id >= self.vocab_size() {
                return Err(Error::Index(format!("token id {id} with vocabulary of {}", self.vocab_size())));
            }
            x.row_mut(r).copy_from_slice(self.token_embedding.value.row(id));
        }
        Ok(x)
    }

    /// Returns the first-token output row and the cache for `backward`.
    pub fn forward(&self, seq: &TokenSequence, mode: Mode) -> Result<(Vec<f64>, EncodeCache)> {
        let x = self.embed(seq)?;
        let mask = (seq.valid_len() < seq.len()).then(|| seq.key_mask());
        let (y, inner) = self.transformer.forward(&x, mask.as_deref(), mode)?;
        Ok((y.row(0).to_vec(), EncodeCache { ids: seq.ids().to_vec(), inner, seq_len: seq.len() }))
    }

    /// Full final-layer output (all positions), eval mode.
    pub fn forward_all(&self, seq: &TokenSequence) -> Result<(Matrix, TransformerCache)> {
        let x = self.embed(seq)?;
        let mask = (seq.valid_len() < seq.len()).then(|| seq.key_mask());
        self.transformer.forward(&x, mask.as_deref(), Mode::Eval)
    }

    pub fn encode(&self, seq: &TokenSequence) -> Result<Vec<f64>> {
        Ok(self.forward(seq, Mode::Eval)?.0)
    }

    /// Backpropagates a gradient on the sequence embedding.
    pub fn backward(&mut self, cache: &EncodeCache, d_embedding: &[f64]) {
        let d = self.dim();
        let mut dy = Matrix::zeros(cache.seq_len, d);
        dy.row_mut(0).copy_from_slice(d_embedding);
        let dx = self.transformer.backward(&cache.inner, &dy);
        for (r, &id) in cache.ids.iter().enumerate() {
            for (g, v) in self.token_embedding.grad.row_mut(id).iter_mut().zip(dx.row(r)) {
                *g += v;
            }
        }
    }
}

impl Parameterized for EncoderModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "token_embedding"), &self.token_embedding);
        self.transformer.visit(&join(prefix, "transformer"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "token_embedding"), &mut self.token_embedding);
        self.transformer.visit_mut(&join(prefix, "transformer"), f);
    }

    fn visit_trainable_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        if !self.frozen {
            self.visit_mut(prefix, f);
        }
    }
}
