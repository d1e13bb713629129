//! Training losses: mean squared 3-vector error for motion and
//! compensation, cross-entropy for coded symbols, and their weighted sum.

use crate::error::{Error, Result};

/// Weights of the motion and compensation terms in the total loss.
#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub lambda_me: f64,
    pub lambda_mc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_me: 1.0,
            lambda_mc: 1.0,
        }
    }
}

fn mean_squared(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch(format!(
            "{} predictions vs {} references",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        for c in 0..3 {
            let d = p[c] - g[c];
            acc += d * d;
        }
    }
    Ok(acc / pred.len() as f64)
}

/// Gradient of [`mean_squared`] with respect to `pred`.
fn mean_squared_backward(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let scale = 2.0 / pred.len().max(1) as f64;
    pred.iter()
        .zip(gt)
        .map(|(p, g)| [scale * (p[0] - g[0]), scale * (p[1] - g[1]), scale * (p[2] - g[2])])
        .collect()
}

/// Mean squared motion-vector error against ground-truth flow.
pub fn loss_me(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<f64> {
    mean_squared(pred, gt)
}

pub fn loss_me_backward(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Vec<[f64; 3]> {
    mean_squared_backward(pred, gt)
}

/// Mean squared predicted-attribute error against the target attributes.
pub fn loss_mc(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<f64> {
    mean_squared(pred, gt)
}

pub fn loss_mc_backward(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Vec<[f64; 3]> {
    mean_squared_backward(pred, gt)
}

/// Cross-entropy of the coded symbols in nats: −Σ ln q. Divide by ln 2 for
/// bits. Probabilities must be in (0, 1]; the density models' floor keeps
/// real pipelines inside that.
pub fn loss_ce(probabilities: &[f64]) -> f64 {
    -probabilities.iter().map(|q| q.ln()).sum::<f64>()
}

/// The combined objective.
pub fn total_loss(ce: f64, me: f64, mc: f64, w: &LossWeights) -> f64 {
    ce + w.lambda_me * me + w.lambda_mc * mc
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exact_prediction_has_zero_loss() {
        let v = vec![[1.0, -2.0, 3.0]; 10];
        assert_eq!(loss_me(&v, &v).unwrap(), 0.0);
        assert_eq!(loss_mc(&v, &v).unwrap(), 0.0);
    }

    #[test]
    fn unit_offset_costs_one() {
        let pred = vec![[1.0, 0.0, 0.0]; 17];
        let gt = vec![[0.0, 0.0, 0.0]; 17];
        assert!((loss_me(&pred, &gt).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn random_pair_matches_flat_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let n = 137;
        let pred: Vec<[f64; 3]> = (0..n)
            .map(|_| [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)])
            .collect();
        let gt: Vec<[f64; 3]> = (0..n)
            .map(|_| [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)])
            .collect();
        let mut flat = 0.0;
        for i in 0..n {
            for c in 0..3 {
                flat += (pred[i][c] - gt[i][c]) * (pred[i][c] - gt[i][c]);
            }
        }
        flat /= n as f64;
        assert!((loss_me(&pred, &gt).unwrap() - flat).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let a = vec![[0.0; 3]; 3];
        let b = vec![[0.0; 3]; 4];
        assert!(matches!(loss_me(&a, &b), Err(Error::LengthMismatch(_))));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(82);
        let pred: Vec<[f64; 3]> = (0..9)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let gt: Vec<[f64; 3]> = (0..9)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let grad = loss_me_backward(&pred, &gt);
        let h = 1e-6;
        for i in 0..pred.len() {
            for c in 0..3 {
                let mut pp = pred.clone();
                let mut pm = pred.clone();
                pp[i][c] += h;
                pm[i][c] -= h;
                let fd = (loss_me(&pp, &gt).unwrap() - loss_me(&pm, &gt).unwrap()) / (2.0 * h);
                assert!((grad[i][c] - fd).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn cross_entropy_closed_forms() {
        assert_eq!(loss_ce(&[1.0, 1.0, 1.0]), 0.0);
        let eight_halves = vec![0.5; 8];
        let nats = loss_ce(&eight_halves);
        assert!((nats - 8.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((nats / std::f64::consts::LN_2 - 8.0).abs() < 1e-12);
    }

    #[test]
    fn total_combines_with_default_unit_weights() {
        let w = LossWeights::default();
        assert!((total_loss(1.0, 2.0, 3.0, &w) - 6.0).abs() < 1e-12);
        let w = LossWeights {
            lambda_me: 0.5,
            lambda_mc: 2.0,
        };
        assert!((total_loss(1.0, 2.0, 3.0, &w) - 8.0).abs() < 1e-12);
    }
}
