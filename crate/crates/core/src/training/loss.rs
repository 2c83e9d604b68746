//! Pairwise and pointwise objectives on raw (pre-sigmoid) scores.

use crate::error::{shape_err, Result};

const PROB_FLOOR: f64 = 1e-12;

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check(a: usize, b: usize) -> Result<()> {
    if a != b || a == 0 {
        return Err(shape_err(format!("loss inputs need equal non-zero lengths, got {a} and {b}")));
    }
    Ok(())
}

/// Mean of `-ln sigma(pos - neg)`.
pub fn bpr_loss(pos_scores: &[f64], neg_scores: &[f64]) -> Result<f64> {
    Ok(bpr_loss_grad(pos_scores, neg_scores)?.0)
}

/// BPR loss with its gradient wrt each positive score (the negative-score
/// gradient is the negation).
pub fn bpr_loss_grad(pos_scores: &[f64], neg_scores: &[f64]) -> Result<(f64, Vec<f64>)> {
    check(pos_scores.len(), neg_scores.len())?;
    let n = pos_scores.len() as f64;
    let mut loss = 0.0;
    let grad = pos_scores
        .iter()
        .zip(neg_scores)
        .map(|(p, q)| {
            let margin = p - q;
            loss += softplus(-margin);
            -sigmoid(-margin) / n
        })
        .collect();
    Ok((loss / n, grad))
}

/// Mean binary cross-entropy of `sigma(score)`, with `ln p` floored at `ln 1e-12`.
pub fn bce_loss(scores: &[f64], labels: &[u8]) -> Result<f64> {
    Ok(bce_loss_grad(scores, labels)?.0)
}

pub fn bce_loss_grad(scores: &[f64], labels: &[u8]) -> Result<(f64, Vec<f64>)> {
    check(scores.len(), labels.len())?;
    if labels.iter().any(|&y| y > 1) {
        return Err(shape_err("labels must be 0 or 1"));
    }
    let n = scores.len() as f64;
    let floor = PROB_FLOOR.ln();
    let mut loss = 0.0;
    let grad = scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| {
            // ln sigma(s) = -softplus(-s), ln(1 - sigma(s)) = -softplus(s)
            let log_p = if y == 1 { -softplus(-s) } else { -softplus(s) };
            if log_p < floor {
                loss -= floor;
                0.0
            } else {
                loss -= log_p;
                (sigmoid(s) - y as f64) / n
            }
        })
        .collect();
    Ok((loss / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bpr_values() {
        let ln2 = std::f64::consts::LN_2;
        assert!((bpr_loss(&[0.3], &[0.3]).unwrap() - ln2).abs() < 1e-12);
        assert!(bpr_loss(&[40.0], &[0.0]).unwrap() < 1e-15);
        assert!((bpr_loss(&[1.0], &[0.0]).unwrap() - 0.313_261_687_518_222_83).abs() < 1e-15);
        assert!(bpr_loss(&[1.0], &[]).is_err());
        assert!(bpr_loss(&[], &[]).is_err());
    }

    #[test]
    fn bpr_translation_invariance_and_monotonicity() {
        let (p, q) = ([0.25, -1.5, 3.0], [0.5, -2.0, 1.0]);
        let shift = |v: &[f64]| v.iter().map(|x| x + 8.0).collect::<Vec<_>>();
        assert_eq!(bpr_loss(&p, &q).unwrap(), bpr_loss(&shift(&p), &shift(&q)).unwrap());
        let mut prev = f64::INFINITY;
        for m in -20..20 {
            let l = bpr_loss(&[m as f64 * 0.5], &[0.0]).unwrap();
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn bce_values() {
        let ln2 = std::f64::consts::LN_2;
        assert!((bce_loss(&[0.0], &[1]).unwrap() - ln2).abs() < 1e-12);
        assert!(bce_loss(&[40.0], &[1]).unwrap() < 1e-12);
        let (s, y) = ([0.3f64, -1.2, 2.5, -0.4], [1u8, 0, 0, 1]);
        let direct: f64 = s
            .iter()
            .zip(&y)
            .map(|(&s, &y)| {
                let p = 1.0 / (1.0 + (-s).exp());
                -(y as f64 * p.ln() + (1.0 - y as f64) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 4.0;
        assert!((bce_loss(&s, &y).unwrap() - direct).abs() < 1e-12);
        assert!((bce_loss(&[-100.0], &[1]).unwrap() - 1e12f64.ln()).abs() < 1e-9);
        assert!(bce_loss(&[0.0], &[2]).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (p, q) = (vec![0.4, -1.0], vec![0.1, 0.7]);
        let (_, g) = bpr_loss_grad(&p, &q).unwrap();
        for k in 0..2 {
            let mut up = p.clone();
            up[k] += 1e-6;
            let mut dn = p.clone();
            dn[k] -= 1e-6;
            let num = (bpr_loss(&up, &q).unwrap() - bpr_loss(&dn, &q).unwrap()) / 2e-6;
            assert!((num - g[k]).abs() < 1e-8);
        }
        let (s, y) = (vec![0.4, -1.0, 2.0], vec![1u8, 0, 0]);
        let (_, g) = bce_loss_grad(&s, &y).unwrap();
        for k in 0..3 {
            let mut up = s.clone();
            up[k] += 1e-6;
            let mut dn = s.clone();
            dn[k] -= 1e-6;
            let num = (bce_loss(&up, &y).unwrap() - bce_loss(&dn, &y).unwrap()) / 2e-6;
            assert!((num - g[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn sigmoid_and_softplus_are_stable() {
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
    }
}
