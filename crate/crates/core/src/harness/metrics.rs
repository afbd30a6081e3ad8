use crate::error::{Error, Result};

/// Macro-averaged classification metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Classes with no true examples; they contribute precision, recall
    /// and f1 of 0 to the macro averages.
    pub absent_classes: Vec<usize>,
}

/// `ways`×`ways` confusion matrix, rows are true labels.
pub fn confusion_matrix(preds: &[usize], labels: &[usize], ways: usize) -> Result<Vec<Vec<usize>>> {
    if preds.len() != labels.len() {
        return Err(Error::input(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    let mut m = vec![vec![0; ways]; ways];
    for (&p, &y) in preds.iter().zip(labels) {
        if p >= ways || y >= ways {
            return Err(Error::input(format!("class index out of range for {ways} classes: pred {p}, label {y}")));
        }
        m[y][p] += 1;
    }
    Ok(m)
}

pub fn classification_metrics(preds: &[usize], labels: &[usize], ways: usize) -> Result<ClassificationMetrics> {
    let m = confusion_matrix(preds, labels, ways)?;
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let (mut p_sum, mut r_sum, mut f_sum) = (0.0, 0.0, 0.0);
    let mut absent = Vec::new();
    for c in 0..ways {
        let tp = m[c][c];
        let actual: usize = m[c].iter().sum();
        let predicted: usize = m.iter().map(|row| row[c]).sum();
        if actual == 0 {
            absent.push(c);
            continue;
        }
        let p = ratio(tp, predicted);
        let r = ratio(tp, actual);
        p_sum += p;
        r_sum += r;
        f_sum += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    }
    let trace: usize = (0..ways).map(|c| m[c][c]).sum();
    let w = ways.max(1) as f64;
    Ok(ClassificationMetrics {
        accuracy: ratio(trace, labels.len()),
        precision: p_sum / w,
        recall: r_sum / w,
        f1: f_sum / w,
        absent_classes: absent,
    })
}

/// Summed per-task, per-shot losses plus the sampling penalty `ζ·K·Y`.
/// `images_per_class` is M; K > M violates the sampling constraint.
pub fn objective_p1(losses: &[Vec<f64>], shots: usize, ways: usize, images_per_class: usize, zeta: f64) -> Result<f64> {
    if shots > images_per_class {
        return Err(Error::Constraint(format!("K = {shots} exceeds M = {images_per_class}")));
    }
    let total: f64 = losses.iter().flatten().sum();
    Ok(total + zeta * (shots * ways) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 2, 2, 1, 0];
        let m = classification_metrics(&y, &y, 3).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));
        assert!(m.absent_classes.is_empty());
    }

    #[test]
    fn constant_predictor_on_two_balanced_classes() {
        let labels = [0, 1, 0, 1, 0, 1];
        let m = classification_metrics(&[0; 6], &labels, 2).unwrap();
        assert_eq!(m.accuracy, 0.5);
        // class 0: p=1/2, r=1, f1=2/3; class 1: all zero
        assert!((m.f1 - 1.0 / 3.0).abs() < 1e-15);
        assert!((m.precision - 0.25).abs() < 1e-15);
        assert!((m.recall - 0.5).abs() < 1e-15);
    }

    #[test]
    fn absent_class_is_flagged() {
        let m = classification_metrics(&[0, 1], &[0, 1], 3).unwrap();
        assert_eq!(m.absent_classes, vec![2]);
        assert!((m.recall - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn mismatched_lengths_rejected() {
        assert!(classification_metrics(&[0], &[0, 1], 2).is_err());
    }

    #[test]
    fn p1_arithmetic() {
        let losses = vec![vec![0.5, 0.25], vec![1.0]];
        assert_eq!(objective_p1(&losses, 5, 10, 20, 0.0).unwrap(), 1.75);
        assert_eq!(objective_p1(&[vec![0.0; 5]], 5, 10, 20, 1.0).unwrap(), 50.0);
        assert!(matches!(objective_p1(&losses, 21, 10, 20, 0.0), Err(Error::Constraint(_))));
    }
}
