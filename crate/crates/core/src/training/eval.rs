use serde::Serialize;

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Accuracy overall, per SNR, and the confusion matrix (`[true][predicted]`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub classes: Vec<String>,
    pub total: u64,
    pub correct: u64,
    pub accuracy: f64,
    pub per_snr: Vec<SnrAccuracy>,
    pub confusion: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SnrAccuracy {
    pub snr_db: i16,
    pub total: u64,
    pub correct: u64,
    pub accuracy: f64,
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        })
        .0
}

impl EvalReport {
    /// Builds a report from `(true label, predicted label, snr)` triples.
    pub fn from_predictions(
        classes: &[String],
        outcomes: impl IntoIterator<Item = (usize, usize, i16)>,
    ) -> Result<Self> {
        let k = classes.len();
        let mut confusion = vec![vec![0u64; k]; k];
        let mut snr: std::collections::BTreeMap<i16, (u64, u64)> = Default::default();
        for (t, p, s) in outcomes {
            if t >= k || p >= k {
                return Err(Error::shape(format!(
                    "label {t} or prediction {p} outside {k} classes"
                )));
            }
            confusion[t][p] += 1;
            let e = snr.entry(s).or_default();
            e.0 += 1;
            e.1 += u64::from(t == p);
        }
        let total: u64 = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(Error::config("cannot evaluate on an empty dataset"));
        }
        let correct: u64 = (0..k).map(|i| confusion[i][i]).sum();
        Ok(Self {
            classes: classes.to_vec(),
            total,
            correct,
            accuracy: correct as f64 / total as f64,
            per_snr: snr
                .into_iter()
                .map(|(snr_db, (total, correct))| SnrAccuracy {
                    snr_db,
                    total,
                    correct,
                    accuracy: correct as f64 / total as f64,
                })
                .collect(),
            confusion,
        })
    }

    /// CSV with one schema for all sections:
    /// `section,snr_db,true_class,pred_class,count,correct,accuracy`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("section,snr_db,true_class,pred_class,count,correct,accuracy\n");
        s.push_str(&format!(
            "overall,,,,{},{},{}\n",
            self.total, self.correct, self.accuracy
        ));
        for r in &self.per_snr {
            s.push_str(&format!(
                "snr,{},,,{},{},{}\n",
                r.snr_db, r.total, r.correct, r.accuracy
            ));
        }
        for (t, row) in self.confusion.iter().enumerate() {
            for (p, &c) in row.iter().enumerate() {
                s.push_str(&format!(
                    "confusion,,{},{},{c},,\n",
                    self.classes[t], self.classes[p]
                ));
            }
        }
        s
    }
}

/// Evaluates `predict` (logits for a batch) over `ds` in batches.
pub fn evaluate_with(
    ds: &Dataset,
    batch_size: usize,
    mut predict: impl FnMut(&Tensor) -> Result<Tensor>,
) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::config("cannot evaluate on an empty dataset"));
    }
    let mut outcomes = Vec::with_capacity(ds.len());
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, labels) = ds.batch(chunk);
        let logits = predict(&x)?;
        let k = logits.shape()[1];
        if k != ds.num_classes() {
            return Err(Error::shape(format!(
                "model predicts {k} classes, dataset has {}",
                ds.num_classes()
            )));
        }
        for ((row, &t), &i) in logits.data().chunks(k).zip(&labels).zip(chunk) {
            outcomes.push((t, argmax(row), ds.frames[i].snr_db));
        }
    }
    EvalReport::from_predictions(&ds.classes, outcomes)
}
