//! Inception-score style metric: exp of the mean KL between per-image
//! class posteriors and the split's marginal class distribution.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// (mean, std) of the per-split scores. Split sizes are ⌊N/splits⌋; any
/// remainder rows are dropped.
pub fn inception_score(probs: &Tensor, splits: usize) -> Result<(f64, f64)> {
    if probs.shape().len() != 2 {
        return Err(Error::shape("(n, c)", format!("{:?}", probs.shape())));
    }
    let (n, c) = (probs.shape()[0], probs.shape()[1]);
    if splits < 1 {
        return Err(Error::Data("splits must be >= 1".into()));
    }
    if n < splits {
        return Err(Error::Data(format!(
            "{n} rows cannot be divided into {splits} splits"
        )));
    }
    for i in 0..n {
        let row = probs.row(i);
        let mut sum = 0.0;
        for &p in row {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::Numerical(format!(
                    "invalid probability {p} in row {i}"
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Numerical(format!(
                "row {i} sums to {sum}, expected 1"
            )));
        }
    }

    let m = n / splits;
    let mut scores = Vec::with_capacity(splits);
    for k in 0..splits {
        let rows = k * m..(k + 1) * m;
        let mut marginal = vec![0.0; c];
        for i in rows.clone() {
            for (mg, &p) in marginal.iter_mut().zip(probs.row(i)) {
                *mg += p;
            }
        }
        for mg in &mut marginal {
            *mg /= m as f64;
        }
        let mut kl_sum = 0.0;
        for i in rows {
            let row = probs.row(i);
            let mut kl = 0.0;
            for (&p, &q) in row.iter().zip(&marginal) {
                if p > 0.0 {
                    kl += p * (p.ln() - q.ln());
                }
            }
            kl_sum += kl;
        }
        scores.push((kl_sum / m as f64).exp());
    }
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores
        .iter()
        .map(|s| (s - mean) * (s - mean))
        .sum::<f64>()
        / splits as f64;
    Ok((mean, var.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rows(data: &[&[f64]]) -> Tensor {
        let c = data[0].len();
        Tensor::new(
            vec![data.len(), c],
            data.iter().flat_map(|r| r.iter().copied()).collect(),
        )
    }

    #[test]
    fn uniform_rows_score_one() {
        let t = Tensor::filled(&[12, 4], 0.25);
        let (mean, std) = inception_score(&t, 3).unwrap();
        assert_eq!(mean, 1.0);
        assert_eq!(std, 0.0);
    }

    #[test]
    fn identical_rows_score_one() {
        let row: &[f64] = &[0.7, 0.2, 0.1];
        let t = rows(&vec![row; 10]);
        let (mean, _) = inception_score(&t, 2).unwrap();
        assert!((mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn one_hot_covering_scores_class_count() {
        let c = 4;
        let n = 40;
        let mut data = Vec::new();
        for i in 0..n {
            let mut row = vec![0.0; c];
            row[i % c] = 1.0;
            data.extend(row);
        }
        let t = Tensor::new(vec![n, c], data);
        let (mean, std) = inception_score(&t, 10).unwrap();
        assert!((mean - c as f64).abs() < 1e-8, "mean {mean}");
        assert!(std.abs() < 1e-8);
    }

    /// Closed-form KL arithmetic for the two-row mixture.
    #[test]
    fn mixed_two_class_hand_computed() {
        let t = rows(&[&[0.9, 0.1], &[0.1, 0.9], &[0.9, 0.1], &[0.1, 0.9]]);
        let (mean, std) = inception_score(&t, 1).unwrap();
        // marginal (0.5, 0.5); KL = 0.9 ln(0.9/0.5) + 0.1 ln(0.1/0.5)
        let kl = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        let want = kl.exp();
        assert!((mean - want).abs() < 1e-12, "{mean} vs {want}");
        assert_eq!(std, 0.0);
    }

    #[test]
    fn invalid_rows_rejected() {
        let bad = rows(&[&[0.5, 0.4]]);
        assert!(inception_score(&bad, 1).is_err());
        let nan = rows(&[&[f64::NAN, 1.0]]);
        assert!(inception_score(&nan, 1).is_err());
        let ok = rows(&[&[0.5, 0.5]]);
        assert!(inception_score(&ok, 2).is_err()); // more splits than rows
    }

    #[test]
    fn flooring_drops_remainder() {
        // 7 rows, 2 splits -> 3 rows each, last row ignored
        let mut data = vec![];
        for i in 0..7 {
            data.extend(if i < 6 { [1.0, 0.0] } else { [0.0, 1.0] });
        }
        let t = Tensor::new(vec![7, 2], data);
        let (mean, _) = inception_score(&t, 2).unwrap();
        // first six rows identical -> each split marginal is one-hot, KL 0
        assert!((mean - 1.0).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn score_bounded_by_class_count(
            raw in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 5), 8..24),
        ) {
            let n = raw.len();
            let mut data = Vec::with_capacity(n * 5);
            for row in &raw {
                let s: f64 = row.iter().sum();
                data.extend(row.iter().map(|v| v / s));
            }
            let t = Tensor::new(vec![n, 5], data);
            let (mean, _) = inception_score(&t, 2).unwrap();
            prop_assert!(mean >= 1.0 - 1e-8);
            prop_assert!(mean <= 5.0 + 1e-8);
        }
    }
}
