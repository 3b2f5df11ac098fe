use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Per-class loss weights, normalised to mean 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    weights: Vec<f64>,
}

impl ClassWeights {
    pub fn uniform(num_classes: usize) -> Self {
        ClassWeights { weights: vec![1.0; num_classes] }
    }

    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Config("class weights must be finite and positive".into()));
        }
        Ok(ClassWeights { weights })
    }

    /// Inverse-frequency weights `N / count_k`, rescaled to mean 1.
    /// Classes with zero count take the largest weight among present classes.
    pub fn from_counts(counts: &[usize]) -> Self {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return ClassWeights::uniform(counts.len());
        }
        let raw: Vec<Option<f64>> = counts
            .iter()
            .map(|&c| (c > 0).then(|| total as f64 / c as f64))
            .collect();
        let max = raw.iter().flatten().cloned().fold(0.0, f64::max);
        let filled: Vec<f64> = raw.iter().map(|w| w.unwrap_or(max)).collect();
        let mean = filled.iter().sum::<f64>() / filled.len() as f64;
        ClassWeights { weights: filled.iter().map(|w| w / mean).collect() }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Weighted mean cross-entropy
/// `Σ_b w[y_b]·(−log softmax(z_b)[y_b]) / Σ_b w[y_b]` and its gradient
/// w.r.t. the logits.
pub fn weighted_cross_entropy(
    logits: &Matrix,
    labels: &[usize],
    weights: &ClassWeights,
) -> Result<(f64, Matrix)> {
    let (batch, classes) = logits.shape();
    if batch == 0 || labels.len() != batch {
        return Err(Error::Shape(format!("{} labels for {batch} logit rows", labels.len())));
    }
    if weights.len() != classes {
        return Err(Error::Shape(format!("{} weights for {classes} classes", weights.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Index(format!("label {bad} with {classes} classes")));
    }
    if !logits.is_finite() {
        return Err(Error::NumericDomain("logits".into()));
    }
    let w = weights.weights();
    let total_w: f64 = labels.iter().map(|&y| w[y]).sum();
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(batch, classes);
    for (b, &y) in labels.iter().enumerate() {
        let row = logits.row(b);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + z.ln();
        loss += w[y] * (lse - row[y]);
        let scale = w[y] / total_w;
        let g = grad.row_mut(b);
        for c in 0..classes {
            g[c] = scale * (row[c] - lse).exp();
        }
        g[y] -= scale;
    }
    Ok((loss / total_w, grad))
}
