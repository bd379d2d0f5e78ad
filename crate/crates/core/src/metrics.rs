//! Classification metrics: accuracy, per-class and averaged precision /
//! recall / F1, and the confusion matrix.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{predictions} predictions but {truths} truths")]
    LengthMismatch { predictions: usize, truths: usize },
    #[error("no predictions to evaluate")]
    Empty,
    #[error("label {label} outside 0..{classes}")]
    LabelOutOfRange { label: usize, classes: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub support: u64,
    pub predicted: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// No true and no predicted instances: F1 has no value and is reported as 0.
    pub f1_undefined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_classes: usize,
    pub total: u64,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[truth][prediction]`
    pub confusion: Vec<Vec<u64>>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn confusion_matrix(predictions: &[usize], truths: &[usize], num_classes: usize) -> Result<Vec<Vec<u64>>, MetricsError> {
    if predictions.len() != truths.len() {
        return Err(MetricsError::LengthMismatch { predictions: predictions.len(), truths: truths.len() });
    }
    let mut m = vec![vec![0u64; num_classes]; num_classes];
    for (&p, &t) in predictions.iter().zip(truths) {
        for label in [p, t] {
            if label >= num_classes {
                return Err(MetricsError::LabelOutOfRange { label, classes: num_classes });
            }
        }
        m[t][p] += 1;
    }
    Ok(m)
}

/// Weighted averages weight each class by its true-class support. Undefined
/// precision (no predictions) or recall (no support) counts as 0.
pub fn evaluate(predictions: &[usize], truths: &[usize], num_classes: usize) -> Result<EvalReport, MetricsError> {
    let confusion = confusion_matrix(predictions, truths, num_classes)?;
    if predictions.is_empty() {
        return Err(MetricsError::Empty);
    }
    let total = predictions.len() as u64;
    let mut per_class = Vec::with_capacity(num_classes);
    let mut correct = 0;
    for c in 0..num_classes {
        let tp = confusion[c][c];
        let support: u64 = confusion[c].iter().sum();
        let predicted: u64 = confusion.iter().map(|row| row[c]).sum();
        correct += tp;
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        // F1 = 2tp / (support + predicted), which is 0 whenever tp is 0.
        let f1 = ratio(2 * tp, support + predicted);
        per_class.push(ClassMetrics { class: c, support, predicted, precision, recall, f1, f1_undefined: support + predicted == 0 });
    }
    let k = num_classes as f64;
    let weighted = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(|m| m.support as f64 * f(m)).sum::<f64>() / total as f64;
    let accuracy = ratio(correct, total);
    Ok(EvalReport {
        num_classes,
        total,
        accuracy,
        macro_precision: per_class.iter().map(|m| m.precision).sum::<f64>() / k,
        macro_recall: per_class.iter().map(|m| m.recall).sum::<f64>() / k,
        macro_f1: per_class.iter().map(|m| m.f1).sum::<f64>() / k,
        weighted_precision: weighted(|m| m.precision),
        // Σ (support_c / N) · (tp_c / support_c) = Σ tp_c / N, evaluated in the exact form.
        weighted_recall: accuracy,
        weighted_f1: weighted(|m| m.f1),
        per_class,
        confusion,
    })
}

impl EvalReport {
    /// Aligned plain-text summary with the per-class table and confusion matrix.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("samples   {}\naccuracy  {:.4}\n\n", self.total, self.accuracy));
        s.push_str(&format!("{:<8} {:>9} {:>9} {:>9}\n", "average", "precision", "recall", "f1"));
        s.push_str(&format!("{:<8} {:>9.4} {:>9.4} {:>9.4}\n", "macro", self.macro_precision, self.macro_recall, self.macro_f1));
        s.push_str(&format!(
            "{:<8} {:>9.4} {:>9.4} {:>9.4}\n\n",
            "weighted", self.weighted_precision, self.weighted_recall, self.weighted_f1
        ));
        s.push_str(&format!("{:<8} {:>9} {:>9} {:>9} {:>9}\n", "class", "support", "precision", "recall", "f1"));
        for m in &self.per_class {
            let mark = if m.f1_undefined { " *" } else { "" };
            s.push_str(&format!(
                "{:<8} {:>9} {:>9.4} {:>9.4} {:>9.4}{mark}\n",
                m.class, m.support, m.precision, m.recall, m.f1
            ));
        }
        if self.per_class.iter().any(|m| m.f1_undefined) {
            s.push_str("* no true or predicted instances; reported as 0\n");
        }
        let width = self.confusion.iter().flatten().map(|v| v.to_string().len()).max().unwrap_or(1).max(3);
        s.push_str("\nconfusion (rows: truth, columns: prediction)\n");
        s.push_str(&format!("{:>5}", ""));
        for c in 0..self.num_classes {
            s.push_str(&format!(" {c:>width$}"));
        }
        s.push('\n');
        for (t, row) in self.confusion.iter().enumerate() {
            s.push_str(&format!("{t:>5}"));
            for v in row {
                s.push_str(&format!(" {v:>width$}"));
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 2, 2, 1];
        let r = evaluate(&y, &y, 3).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert!(r.per_class.iter().all(|m| m.f1 == 1.0));
        assert_eq!(r.macro_f1, 1.0);
        assert_eq!(r.weighted_f1, 1.0);
    }

    #[test]
    fn hand_counted() {
        let r = evaluate(&[0, 1, 0, 1], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(r.accuracy, 0.5);
        assert_eq!(r.per_class[0].recall, 0.5);
        assert_eq!(r.per_class[1].recall, 0.5);
        assert_eq!(r.confusion, vec![vec![1, 1], vec![1, 1]]);
    }

    #[test]
    fn undefined_f1_is_flagged() {
        let r = evaluate(&[0, 0], &[0, 1], 3).unwrap();
        assert!(r.per_class[2].f1_undefined);
        assert_eq!(r.per_class[2].f1, 0.0);
        assert!(!r.per_class[1].f1_undefined);
        assert!(r.to_table().contains('*'));
    }

    #[test]
    fn errors() {
        assert_eq!(evaluate(&[0], &[0, 1], 2), Err(MetricsError::LengthMismatch { predictions: 1, truths: 2 }));
        assert_eq!(evaluate(&[], &[], 2), Err(MetricsError::Empty));
        assert_eq!(evaluate(&[2], &[0], 2), Err(MetricsError::LabelOutOfRange { label: 2, classes: 2 }));
    }

    #[test]
    fn table_is_aligned() {
        let r = evaluate(&[0, 1, 1], &[0, 1, 0], 2).unwrap();
        let t = r.to_table();
        assert!(t.contains("accuracy  0.6667"));
        let rows: Vec<&str> = t.lines().filter(|l| l.starts_with("macro") || l.starts_with("weighted")).collect();
        assert_eq!(rows[0].len(), rows[1].len());
    }

    proptest! {
        #[test]
        fn weighted_recall_matches_definition(pairs in prop::collection::vec((0usize..6, 0usize..6), 1..200)) {
            let (p, t): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let r = evaluate(&p, &t, 6).unwrap();
            let n = t.len() as f64;
            let literal: f64 = r.per_class.iter().map(|m| m.support as f64 / n * m.recall).sum();
            prop_assert!((literal - r.weighted_recall).abs() < 1e-12);
            prop_assert_eq!(r.weighted_recall, r.accuracy);
            for (c, row) in r.confusion.iter().enumerate() {
                prop_assert_eq!(row.iter().sum::<u64>(), t.iter().filter(|&&x| x == c).count() as u64);
            }
        }

        #[test]
        fn permutation_invariant(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60), k in 0usize..60) {
            let (p, t): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
            let mut shuffled = pairs.clone();
            shuffled.rotate_left(k % pairs.len());
            let (p2, t2): (Vec<usize>, Vec<usize>) = shuffled.into_iter().unzip();
            prop_assert_eq!(evaluate(&p, &t, 4).unwrap(), evaluate(&p2, &t2, 4).unwrap());
        }
    }
}
