//! Training objectives. Every function takes and returns tensors so the
//! results stay differentiable.

use mogan_autograd::{grad, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::MarkovianDiscriminator;
use crate::error::{Error, Result};
use crate::generators::BranchKind;

/// Weights of the generator and discriminator objectives at one scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Cosine-direction term.
    pub alpha: f64,
    /// Pixel MSE term.
    pub beta: f64,
    /// Gradient penalty.
    pub lambda_gp: f64,
}

/// How the per-scale weights are assembled.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSchedule {
    pub alpha: f64,
    /// MSE weight on the two coarsest ROI scales.
    pub roi_beta_coarse: f64,
    /// MSE weight on the remaining ROI scales.
    pub roi_beta_fine: f64,
    pub background_beta: f64,
    pub lambda_gp: f64,
}

impl Default for LossSchedule {
    fn default() -> Self {
        LossSchedule { alpha: 50.0, roi_beta_coarse: 10.0, roi_beta_fine: 5.0, background_beta: 10.0, lambda_gp: 1.0 }
    }
}

impl LossSchedule {
    /// Weights for scale `n` of a branch whose coarsest scale is `coarsest`.
    pub fn weights(&self, kind: BranchKind, n: usize, coarsest: usize) -> LossWeights {
        let beta = match kind {
            BranchKind::Roi if n + 1 >= coarsest => self.roi_beta_coarse,
            BranchKind::Roi => self.roi_beta_fine,
            BranchKind::Background => self.background_beta,
        };
        LossWeights { alpha: self.alpha, beta, lambda_gp: self.lambda_gp }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.roi_beta_coarse, self.roi_beta_fine, self.background_beta, self.lambda_gp];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Wasserstein critic terms `(g_term, d_term)`:
/// `g = -mean(D_fake)`, `d = mean(D_fake) - mean(D_real)`.
pub fn adversarial_losses(d_real: &Tensor, d_fake: &Tensor) -> (Tensor, Tensor) {
    let fake = d_fake.mean_all();
    (fake.neg(), fake.sub(&d_real.mean_all()))
}

/// A differentiable scalar critic.
pub trait Critic {
    fn critic_score(&self, x: &Tensor) -> Result<Tensor>;
}

impl Critic for MarkovianDiscriminator {
    fn critic_score(&self, x: &Tensor) -> Result<Tensor> {
        self.score(x)
    }
}

impl<F: Fn(&Tensor) -> Tensor> Critic for F {
    fn critic_score(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self(x))
    }
}

/// Where the penalty's gradient is taken.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyPoint {
    /// `eps * real + (1 - eps) * fake`, `eps ~ U(0, 1)`.
    #[default]
    Interpolate,
    /// The fake sample itself.
    Fake,
}

/// `(||grad_x D(x)|| - 1)^2` at a point chosen by `point`, with `eps` drawn
/// from `seed`. The result is differentiable w.r.t. the critic's parameters.
pub fn gradient_penalty(critic: &dyn Critic, real: &Tensor, fake: &Tensor, seed: u64, point: PenaltyPoint) -> Result<Tensor> {
    if real.shape() != fake.shape() {
        return Err(Error::ShapeMismatch { expected: real.shape().to_vec(), actual: fake.shape().to_vec() });
    }
    let x = match point {
        PenaltyPoint::Interpolate => {
            let eps: f64 = ChaCha8Rng::seed_from_u64(seed).random();
            let mixed = real.data().iter().zip(fake.data()).map(|(r, f)| eps * r + (1.0 - eps) * f).collect();
            Tensor::param(mixed, real.shape())
        }
        PenaltyPoint::Fake => fake.detach_param(),
    };
    penalty_at(critic, &x)
}

/// Penalty at a given point, which must be a leaf that requires grad.
pub fn penalty_at(critic: &dyn Critic, x: &Tensor) -> Result<Tensor> {
    let x = if x.is_leaf() && x.requires_grad() { x.clone() } else { x.detach_param() };
    let score = critic.critic_score(&x)?;
    let g = grad(&score, &[&x], true).remove(0);
    if !g.all_finite() {
        return Err(Error::NonFiniteGradient("gradient penalty"));
    }
    Ok(g.norm2().add_scalar(-1.0).square())
}

/// `1 - <a, b> / (|a| |b|)` over all elements.
pub fn cosine_loss(generated: &Tensor, target: &Tensor) -> Result<Tensor> {
    same_shape(generated, target)?;
    let (na, nb) = (generated.norm2(), target.norm2());
    if na.item() == 0.0 || nb.item() == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(generated.dot(target).div(&na.mul(&nb)).neg().add_scalar(1.0))
}

/// Mean squared difference over elements where `mask` is 1; every element
/// when `mask` is `None`.
pub fn mse_loss(generated: &Tensor, target: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    same_shape(generated, target)?;
    let diff = generated.sub(target);
    match mask {
        None => Ok(diff.square().mean_all()),
        Some(m) => {
            same_shape(generated, m)?;
            let count: f64 = m.data().iter().sum();
            if count == 0.0 {
                return Err(Error::EmptyMask);
            }
            Ok(diff.square().mul(m).sum_all().mul_scalar(1.0 / count))
        }
    }
}

/// `L0 + alpha * L1 + beta * L2`.
pub fn generator_total(l0_g: &Tensor, l1: &Tensor, l2: &Tensor, w: &LossWeights) -> Tensor {
    l0_g.add(&l1.mul_scalar(w.alpha)).add(&l2.mul_scalar(w.beta))
}

/// `L0 + lambda * GP`.
pub fn discriminator_total(l0_d: &Tensor, gp: &Tensor, w: &LossWeights) -> Tensor {
    l0_d.add(&gp.mul_scalar(w.lambda_gp))
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch { expected: a.shape().to_vec(), actual: b.shape().to_vec() });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use mogan_autograd::gradcheck::check_gradients;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(v.to_vec(), &[v.len()])
    }

    #[test]
    fn adversarial_hand_values() {
        let (_, d) = adversarial_losses(&t(&[1.0, 3.0]), &t(&[0.0, 2.0]));
        assert_eq!(d.item(), -1.0);
        let (g, _) = adversarial_losses(&t(&[5.0]), &Tensor::full(&[1, 3, 3], 2.0));
        assert_eq!(g.item(), -2.0);
        let (_, d) = adversarial_losses(&t(&[0.3, 0.1]), &t(&[0.3, 0.1]));
        assert_eq!(d.item(), 0.0);
    }

    #[test]
    fn penalty_hand_values() {
        let x = Tensor::zeros(&[1, 1, 1]);
        let twice = |x: &Tensor| x.sum_all().mul_scalar(2.0);
        assert!((penalty_at(&twice, &x).unwrap().item() - 1.0).abs() < 1e-12);
        let constant = |x: &Tensor| x.sum_all().mul_scalar(0.0).add_scalar(4.0);
        assert!((penalty_at(&constant, &x).unwrap().item() - 1.0).abs() < 1e-12);
        let unit = Tensor::new(vec![0.6, 0.0, 0.8], &[3, 1, 1]);
        let linear = move |x: &Tensor| x.dot(&unit);
        let real = Tensor::new(vec![0.1, 0.2, 0.3], &[3, 1, 1]);
        let fake = Tensor::new(vec![-1.0, 0.5, 0.9], &[3, 1, 1]);
        for point in [PenaltyPoint::Interpolate, PenaltyPoint::Fake] {
            assert!(gradient_penalty(&linear, &real, &fake, 3, point).unwrap().item().abs() < 1e-12);
        }
    }

    #[test]
    fn penalty_rejects_non_finite_gradient() {
        let bad = |x: &Tensor| x.sqrt().sum_all();
        let x = Tensor::new(vec![0.0], &[1, 1, 1]);
        assert!(matches!(penalty_at(&bad, &x), Err(Error::NonFiniteGradient(_))));
    }

    #[test]
    fn cosine_cases() {
        let a = t(&[1.0, 0.0]);
        assert_eq!(cosine_loss(&a, &a).unwrap().item(), 0.0);
        assert_eq!(cosine_loss(&a, &t(&[0.0, 1.0])).unwrap().item(), 1.0);
        assert_eq!(cosine_loss(&a, &t(&[-1.0, 0.0])).unwrap().item(), 2.0);
        assert!(matches!(cosine_loss(&a, &t(&[0.0, 0.0])), Err(Error::ZeroNorm)));
        let b = t(&[0.3, -0.7]);
        let scaled = cosine_loss(&a.mul_scalar(7.5), &b).unwrap().item();
        assert!((scaled - cosine_loss(&a, &b).unwrap().item()).abs() < 1e-15);
    }

    #[test]
    fn mse_cases() {
        let a = t(&[0.1, 0.2, 0.3, 0.4]);
        assert_eq!(mse_loss(&a, &a, None).unwrap().item(), 0.0);
        assert!((mse_loss(&a.add_scalar(0.5), &a, None).unwrap().item() - 0.25).abs() < 1e-15);
        let b = t(&[0.1, 0.2, 0.9, 0.4]);
        let mask = t(&[1.0, 1.0, 0.0, 1.0]);
        assert_eq!(mse_loss(&a, &b, Some(&mask)).unwrap().item(), 0.0);
        assert!(matches!(mse_loss(&a, &b, Some(&t(&[0.0; 4]))), Err(Error::EmptyMask)));
    }

    #[test]
    fn totals() {
        let w = LossWeights { alpha: 50.0, beta: 10.0, lambda_gp: 1.0 };
        let s = Tensor::scalar;
        assert!((generator_total(&s(1.0), &s(0.1), &s(0.01), &w).item() - 6.1).abs() < 1e-9);
        assert!((discriminator_total(&s(-1.0), &s(0.5), &w).item() + 0.5).abs() < 1e-9);
        let none = LossWeights { alpha: 0.0, beta: 0.0, ..w };
        assert_eq!(generator_total(&s(1.5), &s(0.3), &s(0.2), &none).item(), 1.5);
    }

    #[test]
    fn schedule_betas() {
        let s = LossSchedule::default();
        let betas: Vec<f64> = (0..=5).rev().map(|n| s.weights(BranchKind::Roi, n, 5).beta).collect();
        assert_eq!(betas, vec![10.0, 10.0, 5.0, 5.0, 5.0, 5.0]);
        assert!((0..=5).all(|n| s.weights(BranchKind::Background, n, 5).beta == 10.0));
        assert_eq!(s.weights(BranchKind::Roi, 0, 0).alpha, 50.0);
        assert_eq!(s.weights(BranchKind::Roi, 0, 0).lambda_gp, 1.0);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let a: Vec<f64> = (0..16).map(|i| (i as f64 * 0.9).sin() + 0.1).collect();
        let b: Vec<f64> = (0..16).map(|i| (i as f64 * 0.4).cos()).collect();
        let mask = Tensor::new((0..16).map(|i| (i % 3 != 0) as u8 as f64).collect(), &[1, 4, 4]);
        let shapes: [&[usize]; 2] = [&[1, 4, 4], &[1, 4, 4]];
        let w = LossWeights { alpha: 50.0, beta: 10.0, lambda_gp: 1.0 };
        let r = check_gradients(&[a.clone(), b.clone()], &shapes, |ts| cosine_loss(&ts[0], &ts[1]).unwrap());
        assert!(r.max_rel_error < 1e-3, "{r:?}");
        let r = check_gradients(&[a.clone(), b.clone()], &shapes, |ts| mse_loss(&ts[0], &ts[1], Some(&mask)).unwrap());
        assert!(r.max_rel_error < 1e-3, "{r:?}");
        let r = check_gradients(&[a.clone(), b.clone()], &shapes, |ts| {
            let (g, d) = adversarial_losses(&ts[0], &ts[1]);
            let l1 = cosine_loss(&ts[0], &ts[1]).unwrap();
            let l2 = mse_loss(&ts[0], &ts[1], None).unwrap();
            generator_total(&g, &l1, &l2, &w).add(&d.square())
        });
        assert!(r.max_rel_error < 1e-3, "{r:?}");
        // Penalty of a small nonlinear critic, differentiated w.r.t. the
        // critic's weights and the evaluation point.
        let r = check_gradients(&[a, b], &shapes, |ts| {
            let wts = ts[1].clone();
            let critic = move |x: &Tensor| x.mul(&wts).tanh().sum_all();
            penalty_at(&critic, &ts[0]).unwrap()
        });
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }
}
