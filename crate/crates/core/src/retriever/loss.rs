//! Contrastive and distillation objectives with their analytic gradients.

use crate::error::{Error, Result};

/// `-log softmax(pos | pos, negs...)`, evaluated with a max shift.
pub fn nll_loss(pos_score: f64, neg_scores: &[f64]) -> f64 {
    let m = neg_scores.iter().copied().fold(pos_score, f64::max);
    let mut sum = (pos_score - m).exp();
    for &s in neg_scores {
        sum += (s - m).exp();
    }
    m + sum.ln() - pos_score
}

/// Gradient of [`nll_loss`]: `(d/d pos, d/d neg_i)`.
pub fn nll_grad(pos_score: f64, neg_scores: &[f64]) -> (f64, Vec<f64>) {
    let m = neg_scores.iter().copied().fold(pos_score, f64::max);
    let e_pos = (pos_score - m).exp();
    let e_neg: Vec<f64> = neg_scores.iter().map(|&s| (s - m).exp()).collect();
    let z = e_pos + e_neg.iter().sum::<f64>();
    (e_pos / z - 1.0, e_neg.into_iter().map(|e| e / z).collect())
}

/// Mean squared error between student and teacher embeddings.
pub fn kd_loss(student: &[f64], teacher: &[f64]) -> Result<f64> {
    Error::check_dim(teacher.len(), student.len())?;
    let d = student.len() as f64;
    let mut acc = 0.0;
    for (s, t) in student.iter().zip(teacher) {
        acc += (t - s) * (t - s);
    }
    Ok(acc / d)
}

/// Gradient of [`kd_loss`] with respect to the student embedding.
pub fn kd_grad(student: &[f64], teacher: &[f64]) -> Result<Vec<f64>> {
    Error::check_dim(teacher.len(), student.len())?;
    let scale = 2.0 / student.len() as f64;
    Ok(student
        .iter()
        .zip(teacher)
        .map(|(s, t)| scale * (s - t))
        .collect())
}

pub fn multitask_loss(nll: f64, kd: f64) -> f64 {
    nll + kd
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_nll(pos: f64, negs: &[f64]) -> f64 {
        let num = pos.exp();
        -(num / (num + negs.iter().map(|s| s.exp()).sum::<f64>())).ln()
    }

    #[test]
    fn nll_fixtures() {
        assert!((nll_loss(0.7, &[0.7, 0.7, 0.7]) - 4f64.ln()).abs() <= 1e-12);
        // direct evaluation of -ln(e^2 / (e^2 + e^1 + e^0.5))
        assert!((nll_loss(2.0, &[1.0, 0.5]) - 0.464_368_784_107_944_7).abs() <= 1e-12);
        assert_eq!(nll_loss(3.0, &[]), 0.0);
        assert_eq!(nll_loss(-1e4, &[]), 0.0);
    }

    #[test]
    fn nll_is_finite_for_large_scores() {
        for (p, n) in [(1e4, -1e4), (-1e4, 1e4), (1e4, 1e4), (-1e4, -1e4)] {
            let l = nll_loss(p, &[n, 0.0]);
            assert!(l.is_finite(), "{p} {n} -> {l}");
        }
        assert!(naive_nll(1e4, &[0.0]).is_nan());
        assert!((nll_loss(-1e4, &[1e4]) - 2e4).abs() < 1e-6);
    }

    #[test]
    fn kd_fixtures() {
        assert_eq!(kd_loss(&[0.3, -2.0], &[0.3, -2.0]).unwrap(), 0.0);
        assert!((kd_loss(&[0.0, 0.0], &[1.0, 1.0]).unwrap() - 1.0).abs() <= 1e-12);
        assert!((kd_loss(&[1.0, 2.0], &[3.0, 5.0]).unwrap() - 6.5).abs() <= 1e-12);
        assert!(kd_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn multitask_fixtures() {
        assert_eq!(multitask_loss(1.0, 0.5), 1.5);
        assert_eq!(multitask_loss(0.8, 0.0), 0.8);
        assert_eq!(multitask_loss(0.0, 0.25), 0.25);
    }

    #[test]
    fn nll_grad_matches_central_differences() {
        let (pos, negs) = (0.4, vec![1.3, -0.2, 0.9]);
        let (gp, gn) = nll_grad(pos, &negs);
        let h = 1e-6;
        let fd = (nll_loss(pos + h, &negs) - nll_loss(pos - h, &negs)) / (2.0 * h);
        assert!((gp - fd).abs() < 1e-8);
        for i in 0..negs.len() {
            let mut up = negs.clone();
            let mut dn = negs.clone();
            up[i] += h;
            dn[i] -= h;
            let fd = (nll_loss(pos, &up) - nll_loss(pos, &dn)) / (2.0 * h);
            assert!((gn[i] - fd).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn shifted_and_naive_agree(pos in -20.0..20.0f64, negs in prop::collection::vec(-20.0..20.0f64, 0..6)) {
            let a = nll_loss(pos, &negs);
            let b = naive_nll(pos, &negs);
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-3) + 1e-15, "{} vs {}", a, b);
        }

        #[test]
        fn nll_monotone(pos in -10.0..10.0f64, negs in prop::collection::vec(-10.0..10.0f64, 1..5), i in 0usize..5) {
            let h = 1e-3;
            prop_assert!(nll_loss(pos + h, &negs) < nll_loss(pos, &negs));
            let i = i % negs.len();
            let mut up = negs.clone();
            up[i] += h;
            prop_assert!(nll_loss(pos, &up) > nll_loss(pos, &negs));
        }

        #[test]
        fn kd_nonnegative_and_symmetric(
            pairs in prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64), 1..10)
        ) {
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let ab = kd_loss(&a, &b).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, kd_loss(&b, &a).unwrap());
            prop_assert_eq!(kd_loss(&a, &a).unwrap(), 0.0);
            if a != b {
                prop_assert!(ab > 0.0);
            }
        }
    }
}
