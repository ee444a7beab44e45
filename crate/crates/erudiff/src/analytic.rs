//! Closed-form reference quantities for an isotropic Gaussian under the
//! rectified-flow interpolation x_t = (1 - t) x0 + t eps.
//!
//! These formulas are independent of the network path and serve as oracles
//! in tests: the diffused marginal is N((1 - t) mean, s^2 I) with
//! s^2 = (1 - t)^2 sigma^2 + t^2.

use rand::Rng;

use crate::corpus::{standard_normal, Vec2};

#[derive(Debug, Clone, Copy)]
pub struct GaussianField {
    pub mean: Vec2,
    pub sigma: f64,
}

impl GaussianField {
    fn marginal_var(&self, t: f64) -> f64 {
        (1.0 - t).powi(2) * self.sigma * self.sigma + t * t
    }

    /// Posterior mean E[x0 | x_t = x].
    pub fn posterior_clean(&self, x: Vec2, t: f64) -> Vec2 {
        let s2 = self.marginal_var(t);
        let k = (1.0 - t) * self.sigma * self.sigma / s2;
        [
            self.mean[0] + k * (x[0] - (1.0 - t) * self.mean[0]),
            self.mean[1] + k * (x[1] - (1.0 - t) * self.mean[1]),
        ]
    }

    /// Posterior mean E[eps | x_t = x].
    pub fn posterior_noise(&self, x: Vec2, t: f64) -> Vec2 {
        let s2 = self.marginal_var(t);
        let k = t / s2;
        [
            k * (x[0] - (1.0 - t) * self.mean[0]),
            k * (x[1] - (1.0 - t) * self.mean[1]),
        ]
    }

    /// Exact posterior-mean velocity E[eps - x0 | x_t = x].
    pub fn velocity(&self, x: Vec2, t: f64) -> Vec2 {
        let e = self.posterior_noise(x, t);
        let c = self.posterior_clean(x, t);
        [e[0] - c[0], e[1] - c[1]]
    }

    /// Score of the diffused marginal, d/dx log p_t(x).
    pub fn score(&self, x: Vec2, t: f64) -> Vec2 {
        let s2 = self.marginal_var(t);
        [
            -(x[0] - (1.0 - t) * self.mean[0]) / s2,
            -(x[1] - (1.0 - t) * self.mean[1]) / s2,
        ]
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec2 {
        [
            self.mean[0] + self.sigma * standard_normal(rng),
            self.mean[1] + self.sigma * standard_normal(rng),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn velocity_matches_interpolation_identity() {
        let f = GaussianField { mean: [0.8, -0.3], sigma: 0.7 };
        let (x, t) = ([0.2, 0.4], 0.45);
        let c = f.posterior_clean(x, t);
        let e = f.posterior_noise(x, t);
        // x = (1 - t) x0_hat + t eps_hat
        for d in 0..2 {
            assert!(((1.0 - t) * c[d] + t * e[d] - x[d]).abs() < 1e-12);
        }
    }

    #[test]
    fn score_is_negative_noise_over_t() {
        let f = GaussianField { mean: [1.0, 0.0], sigma: 0.5 };
        let (x, t) = ([0.3, -0.6], 0.35);
        let e = f.posterior_noise(x, t);
        let s = f.score(x, t);
        for d in 0..2 {
            assert!((s[d] + e[d] / t).abs() < 1e-12);
        }
    }
}
