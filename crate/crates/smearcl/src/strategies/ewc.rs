//! Elastic weight consolidation: a quadratic penalty that anchors parameters
//! important to completed tasks. One (theta*, Fisher diagonal) anchor is kept
//! per completed task, so the penalty is
//! `(lambda / 2) * sum_tasks sum_k F_k (theta_k - theta*_k)^2`.

use crate::core::ImageRecord;
use crate::detector::train::{image_gradient, AuxLoss};
use crate::detector::DetectorModel;
use crate::error::{Error, Result};
use crate::parallel;
use crate::rng::rng_for;

/// Snapshot of one completed task: trained parameters and their importance.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorEntry {
    pub theta_star: Vec<f64>,
    pub fisher: Vec<f64>,
}

/// All anchors of completed tasks plus the penalty strength.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub lambda: f64,
    pub anchors: Vec<AnchorEntry>,
}

impl AnchorSet {
    pub fn new(lambda: f64) -> Self {
        Self {
            lambda,
            anchors: Vec::new(),
        }
    }

    pub fn push(&mut self, theta_star: Vec<f64>, fisher: Vec<f64>) -> Result<()> {
        if theta_star.len() != fisher.len() {
            return Err(Error::LengthMismatch {
                expected: theta_star.len(),
                got: fisher.len(),
            });
        }
        if let Some(first) = self.anchors.first() {
            if first.theta_star.len() != theta_star.len() {
                return Err(Error::LengthMismatch {
                    expected: first.theta_star.len(),
                    got: theta_star.len(),
                });
            }
        }
        if fisher.iter().any(|&f| f < 0.0 || !f.is_finite()) {
            return Err(Error::Config(
                "fisher entries must be non-negative and finite".into(),
            ));
        }
        self.anchors.push(AnchorEntry { theta_star, fisher });
        Ok(())
    }

    fn check_len(&self, theta: &[f64]) -> Result<()> {
        if let Some(first) = self.anchors.first() {
            if first.theta_star.len() != theta.len() {
                return Err(Error::LengthMismatch {
                    expected: first.theta_star.len(),
                    got: theta.len(),
                });
            }
        }
        Ok(())
    }

    /// `(lambda / 2) * sum_tasks sum_k F_k (theta_k - theta*_k)^2`.
    pub fn penalty(&self, theta: &[f64]) -> Result<f64> {
        self.check_len(theta)?;
        let mut acc = 0.0;
        for anchor in &self.anchors {
            for ((&t, &ts), &f) in theta
                .iter()
                .zip(&anchor.theta_star)
                .zip(&anchor.fisher)
            {
                let d = t - ts;
                acc += f * d * d;
            }
        }
        Ok(self.lambda / 2.0 * acc)
    }

    /// Penalty value; the gradient `lambda * sum_tasks F .* (theta - theta*)`
    /// is accumulated into `grad`.
    pub fn penalty_and_grad(&self, theta: &[f64], grad: &mut [f64]) -> Result<f64> {
        self.check_len(theta)?;
        if grad.len() != theta.len() {
            return Err(Error::LengthMismatch {
                expected: theta.len(),
                got: grad.len(),
            });
        }
        let mut acc = 0.0;
        for anchor in &self.anchors {
            for k in 0..theta.len() {
                let d = theta[k] - anchor.theta_star[k];
                acc += anchor.fisher[k] * d * d;
                grad[k] += self.lambda * anchor.fisher[k] * d;
            }
        }
        Ok(self.lambda / 2.0 * acc)
    }
}

/// Mean of squared per-sample gradients; the diagonal Fisher estimate.
pub fn fisher_from_gradients<I>(n_params: usize, gradients: I) -> Vec<f64>
where
    I: IntoIterator<Item = Vec<f64>>,
{
    let mut acc = vec![0.0; n_params];
    let mut count = 0usize;
    for g in gradients {
        assert_eq!(g.len(), n_params, "gradient length mismatch");
        for (a, v) in acc.iter_mut().zip(&g) {
            *a += v * v;
        }
        count += 1;
    }
    if count > 0 {
        for a in &mut acc {
            *a /= count as f64;
        }
    }
    acc
}

/// Diagonal Fisher of the detection loss over up to `n_samples` images
/// (clamped to the dataset size), drawn by a seeded shuffle.
pub fn fisher_diagonal(
    model: &DetectorModel,
    images: &[&ImageRecord],
    n_samples: usize,
    seed: u64,
) -> Vec<f64> {
    use rand::seq::SliceRandom;
    let n = n_samples.min(images.len());
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut rng = rng_for(seed, &["fisher-subset"], &[]);
    order.shuffle(&mut rng);
    let chosen: Vec<usize> = order.into_iter().take(n).collect();
    let grads = parallel::map_slice(&chosen, |&i| image_gradient(model, images[i]).1);
    fisher_from_gradients(model.params.len(), grads)
}

/// The parameter-space hook plugged into training for EWC runs.
pub struct EwcAux<'a> {
    anchors: &'a AnchorSet,
}

impl<'a> EwcAux<'a> {
    pub fn new(anchors: &'a AnchorSet) -> Self {
        Self { anchors }
    }
}

impl AuxLoss for EwcAux<'_> {
    fn active(&self) -> bool {
        self.anchors.lambda != 0.0 && !self.anchors.anchors.is_empty()
    }

    fn param_loss(&self, params: &[f64], grad: &mut [f64]) -> f64 {
        self.anchors
            .penalty_and_grad(params, grad)
            .expect("anchor lengths match the model")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn penalty_zero_at_anchor() {
        let mut set = AnchorSet::new(10.0);
        set.push(vec![1.0, -2.0, 0.5], vec![3.0, 1.0, 0.0]).unwrap();
        assert_eq!(set.penalty(&[1.0, -2.0, 0.5]).unwrap(), 0.0);
    }

    #[test]
    fn penalty_closed_form() {
        // one anchor, single parameter, F = 1, theta - theta* = 2, lambda = 10
        let mut set = AnchorSet::new(10.0);
        set.push(vec![0.0], vec![1.0]).unwrap();
        assert_eq!(set.penalty(&[2.0]).unwrap(), 20.0);
    }

    #[test]
    fn penalty_sums_over_anchors() {
        let mut set = AnchorSet::new(2.0);
        set.push(vec![0.0, 0.0], vec![1.0, 2.0]).unwrap();
        set.push(vec![1.0, 1.0], vec![0.5, 0.0]).unwrap();
        // theta = [1, 2]: anchor1: 1*1 + 2*4 = 9; anchor2: 0.5*0 + 0 = 0
        assert_eq!(set.penalty(&[1.0, 2.0]).unwrap(), 9.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut set = AnchorSet::new(7.0);
        set.push(vec![0.2, -0.4, 1.1, 0.0], vec![2.0, 0.3, 0.0, 5.0])
            .unwrap();
        set.push(vec![-1.0, 0.0, 0.5, 0.25], vec![1.0, 1.0, 4.0, 0.1])
            .unwrap();
        let theta = [0.7, 0.3, -0.2, 0.9];
        let mut grad = vec![0.0; 4];
        set.penalty_and_grad(&theta, &mut grad).unwrap();
        let h = 1e-6;
        for k in 0..4 {
            let mut up = theta;
            up[k] += h;
            let mut down = theta;
            down[k] -= h;
            let fd = (set.penalty(&up).unwrap() - set.penalty(&down).unwrap()) / (2.0 * h);
            assert!(
                (fd - grad[k]).abs() <= 1e-4 * fd.abs().max(grad[k].abs()).max(1e-9),
                "k={k}: fd {fd} vs analytic {}",
                grad[k]
            );
        }
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let mut set = AnchorSet::new(1.0);
        set.push(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        assert!(set.penalty(&[0.0]).is_err());
        assert!(set.push(vec![0.0], vec![1.0]).is_err());
        assert!(set.push(vec![0.0, 0.0], vec![1.0]).is_err());
    }

    #[test]
    fn negative_fisher_rejected() {
        let mut set = AnchorSet::new(1.0);
        assert!(set.push(vec![0.0], vec![-1.0]).is_err());
    }

    #[test]
    fn fisher_toy_model() {
        // loss L(theta) = 0.5 (theta - c)^2 over one sample: grad = theta - c
        let grad_at = |theta: f64, c: f64| vec![theta - c];
        // at the optimum the gradient vanishes
        assert_eq!(fisher_from_gradients(1, [grad_at(3.0, 3.0)]), vec![0.0]);
        // two units away: F = (theta - c)^2 = 4
        assert_eq!(fisher_from_gradients(1, [grad_at(5.0, 3.0)]), vec![4.0]);
    }

    #[test]
    fn fisher_is_nonnegative_mean_of_squares() {
        let grads = vec![vec![1.0, -2.0], vec![-3.0, 0.5]];
        let f = fisher_from_gradients(2, grads);
        assert_eq!(f, vec![(1.0 + 9.0) / 2.0, (4.0 + 0.25) / 2.0]);
        assert!(f.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn inactive_without_anchors_or_lambda() {
        let empty = AnchorSet::new(10.0);
        assert!(!EwcAux::new(&empty).active());
        let mut zero = AnchorSet::new(0.0);
        zero.push(vec![0.0], vec![1.0]).unwrap();
        assert!(!EwcAux::new(&zero).active());
        let mut live = AnchorSet::new(10.0);
        live.push(vec![0.0], vec![1.0]).unwrap();
        assert!(EwcAux::new(&live).active());
    }
}
