//! Binary-classification evaluation: confusion counts, the four scalar
//! metrics and area under the ROC curve, reported as JSON or as an aligned
//! plain-text table.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The four confusion cells. "Positive" means corrosion throughout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_pos: usize,
    pub false_pos: usize,
    pub true_neg: usize,
    pub false_neg: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }
}

/// Count confusion cells. A sample is predicted positive when its corrosion
/// probability is strictly greater than `threshold`; a score exactly at the
/// threshold is predicted negative.
pub fn confusion(scores: &[f64], labels: &[bool], threshold: f64) -> Result<ConfusionCounts> {
    if scores.len() != labels.len() {
        return Err(Error::Config(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let mut counts = ConfusionCounts::default();
    for (&score, &positive) in scores.iter().zip(labels) {
        match (score > threshold, positive) {
            (true, true) => counts.true_pos += 1,
            (true, false) => counts.false_pos += 1,
            (false, false) => counts.true_neg += 1,
            (false, true) => counts.false_neg += 1,
        }
    }
    Ok(counts)
}

/// Accuracy, precision, recall and F1. Metrics whose denominator is zero are
/// `None` rather than silently zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScalarMetrics {
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

pub fn scalar_metrics(counts: &ConfusionCounts) -> ScalarMetrics {
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            None
        } else {
            Some(num as f64 / den as f64)
        }
    };
    let accuracy = ratio(counts.true_pos + counts.true_neg, counts.total());
    let precision = ratio(counts.true_pos, counts.true_pos + counts.false_pos);
    let recall = ratio(counts.true_pos, counts.true_pos + counts.false_neg);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    ScalarMetrics {
        accuracy,
        precision,
        recall,
        f1,
    }
}

/// Rank-based (Mann-Whitney) area under the ROC curve: the probability that
/// a random positive outscores a random negative, ties counted one half.
/// Requires at least one sample of each class.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Config(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Config(
            "AUC needs at least one positive and one negative sample".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    // Average ranks over tie groups, then sum ranks of the positives.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share the average rank.
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let n_pos_f = n_pos as f64;
    Ok((rank_sum_pos - n_pos_f * (n_pos_f + 1.0) / 2.0) / (n_pos_f * n_neg as f64))
}

/// Full evaluation report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub counts: ConfusionCounts,
    pub accuracy: Option<f64>,
    pub auc: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

/// Build the report from corrosion probabilities and boolean labels
/// (true = corrosion).
pub fn metrics_report(scores: &[f64], labels: &[bool], threshold: f64) -> Result<MetricsReport> {
    let counts = confusion(scores, labels, threshold)?;
    let scalars = scalar_metrics(&counts);
    let auc = auc_roc(scores, labels).ok();
    Ok(MetricsReport {
        counts,
        accuracy: scalars.accuracy,
        auc,
        precision: scalars.precision,
        recall: scalars.recall,
        f1: scalars.f1,
    })
}

impl MetricsReport {
    /// Aligned plain-text table with one row per parameter.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| match v {
            Some(v) => format!("{:.2} %", v * 100.0),
            None => "undefined".to_string(),
        };
        let rows = [
            ("Accuracy", self.accuracy),
            ("Area Under Curve", self.auc),
            ("Precision", self.precision),
            ("Recall", self.recall),
            ("F1", self.f1),
        ];
        let mut out = String::new();
        out.push_str(&format!("{:<18} {:>10}\n", "Parameter", "Score"));
        for (name, value) in rows {
            out.push_str(&format!("{:<18} {:>10}\n", name, fmt(value)));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_split() {
        let counts = confusion(&[0.9, 0.2], &[true, false], 0.5).unwrap();
        assert_eq!(
            counts,
            ConfusionCounts {
                true_pos: 1,
                false_pos: 0,
                true_neg: 1,
                false_neg: 0
            }
        );
        let m = scalar_metrics(&counts);
        assert_eq!(m.accuracy, Some(1.0));
        assert_eq!(m.precision, Some(1.0));
        assert_eq!(m.recall, Some(1.0));
        assert_eq!(m.f1, Some(1.0));
    }

    #[test]
    fn score_at_threshold_predicts_negative() {
        let counts = confusion(&[0.5], &[true], 0.5).unwrap();
        assert_eq!(counts.false_neg, 1);
        assert_eq!(counts.true_pos, 0);
    }

    #[test]
    fn hand_counted_cells() {
        let counts = confusion(&[0.6, 0.6, 0.4], &[true, false, true], 0.5).unwrap();
        assert_eq!(
            counts,
            ConfusionCounts {
                true_pos: 1,
                false_pos: 1,
                true_neg: 0,
                false_neg: 1
            }
        );
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(confusion(&[0.5], &[true, false], 0.5).is_err());
    }

    #[test]
    fn f1_reproduces_published_pairs() {
        // Harmonic mean applied to published precision/recall pairs.
        let f1 = |p: f64, r: f64| 2.0 * p * r / (p + r);
        assert!((f1(0.8127, 0.7233) - 0.7654).abs() < 1e-4);
        assert!((f1(0.8938, 0.8386) - 0.8653).abs() < 1e-4);
    }

    #[test]
    fn undefined_metrics_are_none_not_zero() {
        let counts = ConfusionCounts {
            true_pos: 0,
            false_pos: 0,
            true_neg: 5,
            false_neg: 0,
        };
        let m = scalar_metrics(&counts);
        assert_eq!(m.precision, None);
        assert_eq!(m.recall, None);
        assert_eq!(m.f1, None);
        assert_eq!(m.accuracy, Some(1.0));
    }

    #[test]
    fn f1_lies_between_precision_and_recall() {
        for (tp, fp, tn, fne) in [(5, 2, 7, 3), (1, 4, 2, 2), (10, 1, 1, 9)] {
            let counts = ConfusionCounts {
                true_pos: tp,
                false_pos: fp,
                true_neg: tn,
                false_neg: fne,
            };
            let m = scalar_metrics(&counts);
            let (p, r, f1) = (m.precision.unwrap(), m.recall.unwrap(), m.f1.unwrap());
            assert!(f1 <= p.max(r) + 1e-12);
            assert!(f1 >= p.min(r) - 1e-12);
        }
    }

    #[test]
    fn auc_perfect_separation() {
        let auc = auc_roc(&[0.9, 0.8, 0.3, 0.4], &[true, true, false, false]).unwrap();
        assert_eq!(auc, 1.0);
    }

    #[test]
    fn auc_all_ties_is_half() {
        let auc = auc_roc(&[0.5; 6], &[true, false, true, false, true, false]).unwrap();
        assert!((auc - 0.5).abs() < 1e-12);
    }

    #[test]
    fn auc_matches_exhaustive_pair_counting() {
        let scores = [0.9, 0.3, 0.4, 0.1];
        let labels = [true, true, false, false];
        // Exhaustive oracle: count positive/negative pairs directly.
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        let expected = wins / pairs;
        assert!((expected - 0.75).abs() < 1e-12);
        let auc = auc_roc(&scores, &labels).unwrap();
        assert!((auc - expected).abs() < 1e-12);
    }

    #[test]
    fn auc_invariant_under_monotone_transform() {
        let scores = [0.9, 0.31, 0.44, 0.12, 0.7, 0.66];
        let labels = [true, false, true, false, true, false];
        let cubed: Vec<f64> = scores.iter().map(|s| s.powi(3)).collect();
        let a = auc_roc(&scores, &labels).unwrap();
        let b = auc_roc(&cubed, &labels).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn auc_invariant_under_complement() {
        let scores = [0.9, 0.31, 0.44, 0.12, 0.7];
        let labels = [true, false, true, false, true];
        let flipped_scores: Vec<f64> = scores.iter().map(|s| 1.0 - s).collect();
        let flipped_labels: Vec<bool> = labels.iter().map(|l| !l).collect();
        let a = auc_roc(&scores, &labels).unwrap();
        let b = auc_roc(&flipped_scores, &flipped_labels).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn auc_rejects_single_class() {
        assert!(auc_roc(&[0.4, 0.5], &[true, true]).is_err());
    }

    #[test]
    fn table_contains_the_five_rows() {
        let report = metrics_report(&[0.9, 0.1], &[true, false], 0.5).unwrap();
        let table = report.to_table();
        for row in ["Accuracy", "Area Under Curve", "Precision", "Recall", "F1"] {
            assert!(table.contains(row), "missing row {row}");
        }
    }
}
