//! Frame-level evaluation: binary counts, AUC, confusion matrices and reports.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{FramePool, Label, Repertoire};
use crate::error::{Error, Result};
use crate::nnet::{joint_loss, ModelParams, PredictionBatch};
use crate::optim::predict_pool;

pub const THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

fn pct(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| 100.0 * num as f64 / den as f64)
}

impl BinaryCounts {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Percentage; `None` when nothing was predicted positive.
    pub fn precision(&self) -> Option<f64> {
        pct(self.tp, self.tp + self.fp)
    }

    /// Percentage; `None` when there are no positive frames.
    pub fn recall(&self) -> Option<f64> {
        pct(self.tp, self.tp + self.fn_)
    }

    /// Percentage; `None` on empty input.
    pub fn accuracy(&self) -> Option<f64> {
        pct(self.tp + self.tn, self.total())
    }

    pub fn add(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }
}

/// Counts at the 0.5 threshold (`p > 0.5` is positive).
pub fn binary_metrics(p_signal: &[f64], labels: &[bool]) -> Result<BinaryCounts> {
    if p_signal.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: p_signal.len(),
            right: labels.len(),
        });
    }
    let mut c = BinaryCounts::default();
    for (&p, &y) in p_signal.iter().zip(labels) {
        c.add(p > THRESHOLD, y);
    }
    Ok(c)
}

/// Area under the ROC curve as the Mann-Whitney statistic, ties counted half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: scores.len(),
            right: labels.len(),
        });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of (1-based, tie-averaged) ranks of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum += avg_rank;
            }
        }
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// `K x K` counts, rows indexed by the true class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    /// Each non-empty row divided by its sum; empty rows stay zero.
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let s: u64 = row.iter().sum();
                row.iter()
                    .map(|&c| if s > 0 { c as f64 / s as f64 } else { 0.0 })
                    .collect()
            })
            .collect()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>, names: &[String]) -> Result<()> {
        if names.len() != self.n_classes() {
            return Err(Error::LengthMismatch {
                left: self.n_classes(),
                right: names.len(),
            });
        }
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["true\\predicted".to_string()];
        header.extend(names.iter().cloned());
        w.write_record(&header)?;
        for (name, row) in names.iter().zip(&self.counts) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(|c| c.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Confusion matrix of 0-based class predictions against 0-based labels.
pub fn confusion(predicted: &[usize], actual: &[usize], n_classes: usize) -> Result<ConfusionMatrix> {
    if predicted.len() != actual.len() {
        return Err(Error::LengthMismatch {
            left: predicted.len(),
            right: actual.len(),
        });
    }
    let mut counts = vec![vec![0u64; n_classes]; n_classes];
    for (&p, &a) in predicted.iter().zip(actual) {
        for label in [p, a] {
            if label >= n_classes {
                return Err(Error::LabelOutOfRange {
                    label,
                    classes: n_classes,
                });
            }
        }
        counts[a][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryReport {
    #[serde(flatten)]
    pub counts: BinaryCounts,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub auc: Option<f64>,
    pub loss: f64,
    /// Signal/noise confusion, rows `[noise, signal]`.
    pub confusion: [[u64; 2]; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiReport {
    /// Over signal frames only, as a percentage.
    pub accuracy: Option<f64>,
    /// Mean cross-entropy over signal frames only.
    pub loss: f64,
    pub classes: Vec<String>,
    pub confusion: ConfusionMatrix,
    pub confusion_normalized: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub partition: String,
    pub frames: usize,
    pub total_loss: f64,
    pub binary: BinaryReport,
    pub multi: MultiReport,
}

impl EvalReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(&mut f, self)?;
        writeln!(f)?;
        f.flush()?;
        Ok(())
    }
}

/// Builds a report from predictions already computed for `labels`.
pub fn report_from_predictions(
    preds: &PredictionBatch,
    labels: &[Label],
    repertoire: &Repertoire,
    partition: &str,
) -> Result<EvalReport> {
    if preds.n_classes != repertoire.len() {
        return Err(Error::DimensionMismatch {
            expected: repertoire.len(),
            found: preds.n_classes,
        });
    }
    let loss = joint_loss(preds, labels)?;
    let truth: Vec<bool> = labels.iter().map(|l| l.is_signal()).collect();
    let counts = binary_metrics(&preds.p_signal, &truth)?;
    let auc = match auc(&preds.p_signal, &truth) {
        Ok(a) => Some(a),
        Err(Error::SingleClass) => None,
        Err(e) => return Err(e),
    };
    let mut predicted = Vec::new();
    let mut actual = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        if let Label::Vocalization(k) = l {
            predicted.push(preds.argmax(i));
            actual.push(*k);
        }
    }
    let cm = confusion(&predicted, &actual, repertoire.len())?;
    Ok(EvalReport {
        partition: partition.to_string(),
        frames: labels.len(),
        total_loss: loss.total,
        binary: BinaryReport {
            counts,
            accuracy: counts.accuracy(),
            precision: counts.precision(),
            recall: counts.recall(),
            auc,
            loss: loss.binary,
            confusion: [[counts.tn, counts.fp], [counts.fn_, counts.tp]],
        },
        multi: MultiReport {
            accuracy: pct(cm.trace(), actual.len() as u64),
            loss: loss.multi,
            classes: repertoire.names().to_vec(),
            confusion_normalized: cm.normalized(),
            confusion: cm,
        },
    })
}

/// Evaluates `params` in eval mode on every frame of `pool`.
pub fn evaluate(
    params: &ModelParams,
    pool: &FramePool,
    repertoire: &Repertoire,
    partition: &str,
) -> Result<EvalReport> {
    let preds = predict_pool(params, pool)?;
    report_from_predictions(&preds, pool.labels(), repertoire, partition)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: Option<f64>, b: f64) -> bool {
        a.is_some_and(|a| (a - b).abs() <= 0.01)
    }

    #[test]
    fn baboon_test_counts() {
        let c = BinaryCounts::new(4300, 901, 463, 19479);
        assert!(close(c.precision(), 82.68));
        assert!(close(c.recall(), 90.28));
        assert!(close(c.accuracy(), 94.58));
    }

    #[test]
    fn baby_test_counts() {
        let c = BinaryCounts::new(3123, 21, 8, 8851);
        assert!(close(c.precision(), 99.33));
        assert!(close(c.recall(), 99.74));
        assert!(close(c.accuracy(), 99.76));
    }

    #[test]
    fn perfect_predictions() {
        let c = binary_metrics(&[0.9, 0.1, 0.7], &[true, false, true]).unwrap();
        assert_eq!(c.precision(), Some(100.0));
        assert_eq!(c.recall(), Some(100.0));
    }

    #[test]
    fn precision_absent_without_positive_predictions() {
        let c = binary_metrics(&[0.5, 0.1], &[true, false]).unwrap();
        assert_eq!(c.precision(), None);
        assert_eq!(c.fn_, 1);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(), 0.75);
        assert_eq!(auc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert!(matches!(auc(&[0.1, 0.2], &[true, true]), Err(Error::SingleClass)));
    }

    #[test]
    fn confusion_examples() {
        let cm = confusion(&[0, 1, 1], &[0, 0, 1], 2).unwrap();
        assert_eq!(cm.counts, vec![vec![1, 1], vec![0, 1]]);
        assert_eq!(cm.normalized()[0], vec![0.5, 0.5]);
        let empty = confusion(&[], &[], 3).unwrap();
        assert!(empty.counts.iter().flatten().all(|&c| c == 0));
        assert!(confusion(&[3], &[0], 3).is_err());
    }
}
