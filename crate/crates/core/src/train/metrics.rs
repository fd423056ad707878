//! Accuracy at a fixed threshold and step-wise average precision.

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::data::{FAKE, REAL};

/// Fraction of matching labels.
pub fn accuracy(predicted: &[usize], labels: &[usize]) -> Result<f64, TrainError> {
    if labels.is_empty() || predicted.len() != labels.len() {
        return Err(TrainError::EmptyEval);
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Average precision of `scores` for the positive (fake) class. Ranks by
/// score descending, ties by id ascending, and sums `(R_k − R_{k−1})·P_k`
/// over the ranks that hit a positive.
pub fn compute_ap(scores: &[f64], labels: &[usize], ids: &[u64]) -> Result<f64, TrainError> {
    let n = scores.len();
    if labels.len() != n || ids.len() != n {
        return Err(TrainError::Metric(format!(
            "{} scores, {} labels, {} ids",
            n,
            labels.len(),
            ids.len()
        )));
    }
    let positives = labels.iter().filter(|&&l| l == FAKE).count();
    if positives == 0 {
        return Err(TrainError::Metric("average precision needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(ids[a].cmp(&ids[b])));
    let npos = positives as f64;
    let mut tp = 0usize;
    let mut ap = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == FAKE {
            tp += 1;
            let recall = tp as f64 / npos;
            let prev = (tp - 1) as f64 / npos;
            let precision = tp as f64 / (rank + 1) as f64;
            ap += (recall - prev) * precision;
        }
    }
    Ok(ap)
}

/// Per-sample outputs of one evaluation pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub id: u64,
    pub label: usize,
    pub p_fake: f64,
    pub logit_real: f64,
    pub logit_fake: f64,
    pub predicted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub name: String,
    pub n: usize,
    pub accuracy: f64,
    pub average_precision: f64,
    pub real_accuracy: f64,
    pub fake_accuracy: f64,
}

impl EvalMetrics {
    pub fn from_scored(name: &str, scored: &[Scored]) -> Result<Self, TrainError> {
        let labels: Vec<usize> = scored.iter().map(|s| s.label).collect();
        let predicted: Vec<usize> = scored.iter().map(|s| s.predicted).collect();
        let class_acc = |c: usize| {
            let (p, l): (Vec<usize>, Vec<usize>) = scored
                .iter()
                .filter(|s| s.label == c)
                .map(|s| (s.predicted, s.label))
                .unzip();
            if l.is_empty() {
                Ok(0.0)
            } else {
                accuracy(&p, &l)
            }
        };
        Ok(EvalMetrics {
            name: name.to_string(),
            n: scored.len(),
            accuracy: accuracy(&predicted, &labels)?,
            average_precision: compute_ap(
                &scored.iter().map(|s| s.p_fake).collect::<Vec<_>>(),
                &labels,
                &scored.iter().map(|s| s.id).collect::<Vec<_>>(),
            )?,
            real_accuracy: class_acc(REAL)?,
            fake_accuracy: class_acc(FAKE)?,
        })
    }
}

/// Everything `metrics.json` records. Wall-clock lives in a separate file
/// so identical runs produce identical reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: serde_json::Value,
    pub steps: u64,
    /// Training loss per optimizer step.
    pub loss_curve: Vec<f64>,
    /// Gate value per block, recorded after every epoch.
    pub gate_history: Vec<Vec<f64>>,
    pub eval: Vec<EvalMetrics>,
}

impl MetricsReport {
    pub fn final_gates(&self) -> &[f64] {
        self.gate_history.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn eval_named(&self, name: &str) -> Option<&EvalMetrics> {
        self.eval.iter().find(|e| e.name == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_example() {
        assert_eq!(accuracy(&[1, 0, 0, 1], &[1, 0, 1, 1]).unwrap(), 0.75);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn ap_examples() {
        let ap = compute_ap(&[0.9, 0.8, 0.3], &[1, 0, 1], &[0, 1, 2]).unwrap();
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
        assert_eq!(compute_ap(&[0.9, 0.8, 0.1], &[1, 1, 0], &[0, 1, 2]).unwrap(), 1.0);
        let n = 7;
        let scores: Vec<f64> = (0..n).map(|i| 1.0 - i as f64 / n as f64).collect();
        let mut labels = vec![0; n];
        labels[n - 1] = 1;
        let ids: Vec<u64> = (0..n as u64).collect();
        assert!((compute_ap(&scores, &labels, &ids).unwrap() - 1.0 / n as f64).abs() < 1e-15);
        assert!(compute_ap(&[0.5], &[0], &[0]).is_err());
    }

    #[test]
    fn ties_break_by_id() {
        // Equal scores: the positive with the smaller id ranks first.
        let a = compute_ap(&[0.5, 0.5], &[1, 0], &[0, 1]).unwrap();
        let b = compute_ap(&[0.5, 0.5], &[1, 0], &[1, 0]).unwrap();
        assert_eq!(a, 1.0);
        assert_eq!(b, 0.5);
    }
}
