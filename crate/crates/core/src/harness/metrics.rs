//! Classification metrics: accuracy, confusion matrix, Cohen's kappa.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::tensor::{Elem, Tensor};
use crate::Result;

/// Row-wise argmax of a `[B, K]` logits tensor; ties go to the lower class.
pub fn predictions<E: Elem>(logits: &Tensor<E>) -> Result<Vec<usize>> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(Error::Shape(format!(
            "predictions expect [batch, classes] logits, got {s:?}"
        )));
    }
    let (b, k) = (s[0], s[1]);
    let data = logits.data_vec();
    let mut out = Vec::with_capacity(b);
    for row in 0..b {
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for c in 0..k {
            let v = data[row * k + c].to_f64c();
            if v > best_v {
                best_v = v;
                best = c;
            }
        }
        out.push(best);
    }
    Ok(out)
}

fn check_lengths(pred: &[usize], truth: &[usize]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Data(format!(
            "prediction/label length mismatch: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Data("metrics need at least one sample".into()));
    }
    Ok(())
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(pred, truth)?;
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// `matrix[t][p]` counts samples of true class `t` predicted as `p`.
pub fn confusion_matrix(
    pred: &[usize],
    truth: &[usize],
    classes: usize,
) -> Result<Vec<Vec<u64>>> {
    check_lengths(pred, truth)?;
    let mut m = vec![vec![0u64; classes]; classes];
    for (p, t) in pred.iter().zip(truth) {
        if *p >= classes || *t >= classes {
            return Err(Error::Data(format!(
                "class index out of range: pred {p}, truth {t}, classes {classes}"
            )));
        }
        m[*t][*p] += 1;
    }
    Ok(m)
}

/// Chance-corrected agreement: (p_o - p_e) / (1 - p_e), with marginal
/// expected agreement p_e. Degenerate case where chance agreement is total
/// (both marginals concentrated on one class) scores 1 for perfect
/// agreement and 0 otherwise.
pub fn cohens_kappa(pred: &[usize], truth: &[usize], classes: usize) -> Result<f64> {
    let m = confusion_matrix(pred, truth, classes)?;
    let n = pred.len() as f64;
    let p_o = (0..classes).map(|c| m[c][c]).sum::<u64>() as f64 / n;
    let mut p_e = 0.0;
    for c in 0..classes {
        let truth_marginal: u64 = m[c].iter().sum();
        let pred_marginal: u64 = (0..classes).map(|t| m[t][c]).sum();
        p_e += (truth_marginal as f64 / n) * (pred_marginal as f64 / n);
    }
    if (1.0 - p_e).abs() < 1e-12 {
        return Ok(if (1.0 - p_o).abs() < 1e-12 { 1.0 } else { 0.0 });
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Bundle reported by evaluation commands.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub kappa: f64,
    pub confusion: Vec<Vec<u64>>,
    pub samples: usize,
}

pub fn evaluate_predictions(
    pred: &[usize],
    truth: &[usize],
    classes: usize,
) -> Result<EvalMetrics> {
    Ok(EvalMetrics {
        accuracy: accuracy(pred, truth)?,
        kappa: cohens_kappa(pred, truth, classes)?,
        confusion: confusion_matrix(pred, truth, classes)?,
        samples: pred.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_agreement_scores_one() {
        let y = vec![0, 1, 2, 3, 2, 1, 0, 3];
        assert_eq!(accuracy(&y, &y).unwrap(), 1.0);
        assert_eq!(cohens_kappa(&y, &y, 4).unwrap(), 1.0);
    }

    #[test]
    fn kappa_matches_hand_worked_two_class_table() {
        // Confusion [[20, 5], [10, 15]]: p_o = 0.7, marginals give
        // p_e = 0.5*0.6 + 0.5*0.4 = 0.5, so kappa = 0.4.
        let mut truth = Vec::new();
        let mut pred = Vec::new();
        for (t, p, n) in [(0, 0, 20), (0, 1, 5), (1, 0, 10), (1, 1, 15)] {
            truth.extend(std::iter::repeat(t).take(n));
            pred.extend(std::iter::repeat(p).take(n));
        }
        let k = cohens_kappa(&pred, &truth, 2).unwrap();
        assert!((k - 0.4).abs() < 1e-12, "got {k}");
        assert!((accuracy(&pred, &truth).unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(
            confusion_matrix(&pred, &truth, 2).unwrap(),
            vec![vec![20, 5], vec![10, 15]]
        );
    }

    #[test]
    fn random_balanced_predictions_have_near_zero_kappa() {
        // Monte-Carlo oracle: uniform guesses on balanced 4-class labels.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 1000;
        let truth: Vec<usize> = (0..n).map(|i| i % 4).collect();
        let mut sum = 0.0;
        let reps = 200;
        for _ in 0..reps {
            let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
            sum += cohens_kappa(&pred, &truth, 4).unwrap();
        }
        let mean = sum / reps as f64;
        assert!(mean.abs() < 0.1, "mean kappa {mean}");
    }

    #[test]
    fn constant_labels_degenerate_cases() {
        let truth = vec![1usize; 10];
        assert_eq!(cohens_kappa(&truth.clone(), &truth, 3).unwrap(), 1.0);
        let off = vec![2usize; 10];
        assert_eq!(cohens_kappa(&off, &truth, 3).unwrap(), 0.0);
    }

    #[test]
    fn predictions_take_rowwise_argmax() {
        let logits =
            Tensor::<f64>::from_vec(vec![3, 2], vec![0.1, 0.9, 2.0, -1.0, 0.5, 0.5]).unwrap();
        // Tie on the last row resolves to the lower class index.
        assert_eq!(predictions(&logits).unwrap(), vec![1, 0, 0]);
        let bad = Tensor::<f64>::from_vec(vec![4], vec![0.0; 4]).unwrap();
        assert!(predictions(&bad).is_err());
    }

    #[test]
    fn mismatched_or_out_of_range_inputs_error() {
        assert!(accuracy(&[0, 1], &[0]).is_err());
        assert!(accuracy(&[], &[]).is_err());
        assert!(confusion_matrix(&[5], &[0], 2).is_err());
    }
}
