use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: String,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub name: String,
    pub method: String,
    pub accuracy: f64,
    pub per_class: Vec<ClassAccuracy>,
    pub samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relative_improvement: Option<f64>,
    pub config_hash: String,
    pub seed: u64,
    #[serde(default)]
    pub best_epoch: usize,
    #[serde(default)]
    pub epochs_run: usize,
    #[serde(default)]
    pub val_accuracy: f64,
}

/// Accuracy counts over (prediction, truth) pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tally {
    pub correct: Vec<usize>,
    pub total: Vec<usize>,
}

impl Tally {
    pub fn new(num_classes: usize) -> Self {
        Tally { correct: vec![0; num_classes], total: vec![0; num_classes] }
    }

    pub fn record(&mut self, predicted: usize, truth: usize) {
        self.total[truth] += 1;
        if predicted == truth {
            self.correct[truth] += 1;
        }
    }

    pub fn samples(&self) -> usize {
        self.total.iter().sum()
    }

    pub fn accuracy(&self) -> Result<f64> {
        let n = self.samples();
        if n == 0 {
            return Err(Error::EmptyEval);
        }
        Ok(self.correct.iter().sum::<usize>() as f64 / n as f64)
    }

    pub fn per_class(&self, class_names: &[String]) -> Vec<ClassAccuracy> {
        class_names
            .iter()
            .zip(self.correct.iter().zip(&self.total))
            .map(|(name, (&c, &t))| ClassAccuracy {
                class: name.clone(),
                correct: c,
                total: t,
                accuracy: if t == 0 { 0.0 } else { c as f64 / t as f64 },
            })
            .collect()
    }
}

/// Index of the largest logit; the lowest index wins ties.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    best
}

/// `(acc − base) / base`.
pub fn relative_improvement(accuracy: f64, baseline: f64) -> Result<f64> {
    if baseline <= 0.0 {
        return Err(Error::Config(format!("baseline accuracy {baseline} must be positive")));
    }
    Ok((accuracy - baseline) / baseline)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub name: String,
    pub accuracy_pct: f64,
    pub rel_imp_pct: f64,
}

/// Accuracy and relative improvement of every report against the one
/// named `baseline`, in input order.
pub fn compare(reports: &[MetricsReport], baseline: &str) -> Result<Vec<ComparisonRow>> {
    let base = reports
        .iter()
        .find(|r| r.name == baseline)
        .ok_or_else(|| Error::Config(format!("baseline {baseline:?} not among reports")))?;
    reports
        .iter()
        .map(|r| {
            Ok(ComparisonRow {
                name: r.name.clone(),
                accuracy_pct: 100.0 * r.accuracy,
                rel_imp_pct: 100.0 * relative_improvement(r.accuracy, base.accuracy)?,
            })
        })
        .collect()
}

pub fn to_markdown(rows: &[ComparisonRow]) -> String {
    let mut out = String::from("| Model | Acc(%) | Rel.Imp.(%) |\n|---|---:|---:|\n");
    for r in rows {
        out.push_str(&format!("| {} | {:.2} | {:.0} |\n", r.name, r.accuracy_pct, r.rel_imp_pct));
    }
    out
}

pub fn to_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from("model,accuracy_pct,rel_imp_pct\n");
    for r in rows {
        out.push_str(&format!("{},{:.4},{:.4}\n", r.name, r.accuracy_pct, r.rel_imp_pct));
    }
    out
}
