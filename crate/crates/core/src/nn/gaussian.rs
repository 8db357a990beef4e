//! Tanh-squashed diagonal Gaussian policy head.
//!
//! The pre-squash sample is `u = mean + std * z` with `z ~ N(0, I)` and the
//! action is `tanh(u)`. Log densities include the change-of-variables term
//! `-sum log(1 - tanh(u)^2)`, evaluated in the overflow-free form
//! `2 (log 2 - u - softplus(-2u))`.

use rand::Rng;
use rand_distr::StandardNormal;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Data actions are pulled this far inside (-1, 1) before `atanh`.
pub const ACTION_EPS: f64 = 1e-6;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// `log(1 - tanh(u)^2)` without cancellation for large `|u|`.
pub fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

/// Clamp raw network outputs into the configured log-std range.
pub fn clamp_log_std(raw: f64) -> f64 {
    raw.clamp(LOG_STD_MIN, LOG_STD_MAX)
}

/// A head for one state: per-coordinate mean and (unclamped) log-std.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianHead {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

/// A reparameterized draw together with what backprop needs.
#[derive(Debug, Clone, PartialEq)]
pub struct SquashedSample {
    pub action: Vec<f64>,
    pub log_prob: f64,
    /// The standard-normal noise that produced the draw.
    pub noise: Vec<f64>,
}

/// Gradients w.r.t. the head outputs (mean, raw log-std).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrad {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl GaussianHead {
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Self {
        debug_assert_eq!(mean.len(), log_std.len());
        Self { mean, log_std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn std(&self, j: usize) -> f64 {
        clamp_log_std(self.log_std[j]).exp()
    }

    /// Deterministic action `tanh(mean)`.
    pub fn mode(&self) -> Vec<f64> {
        self.mean.iter().map(|m| m.tanh()).collect()
    }

    /// Draw with explicit noise `z`.
    pub fn sample_with_noise(&self, noise: &[f64]) -> SquashedSample {
        let mut action = Vec::with_capacity(self.dim());
        let mut log_prob = 0.0;
        for (j, &z) in noise.iter().enumerate() {
            let ls = clamp_log_std(self.log_std[j]);
            let u = self.mean[j] + ls.exp() * z;
            action.push(u.tanh());
            log_prob += -0.5 * z * z - ls - HALF_LN_2PI - log_one_minus_tanh_sq(u);
        }
        SquashedSample {
            action,
            log_prob,
            noise: noise.to_vec(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SquashedSample {
        let noise: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        self.sample_with_noise(&noise)
    }

    /// Backprop through a reparameterized sample.
    ///
    /// `d_action` and `d_log_prob` are the loss gradients w.r.t. the squashed
    /// action and the sample's log-probability.
    pub fn sample_backward(&self, sample: &SquashedSample, d_action: &[f64], d_log_prob: f64) -> HeadGrad {
        let d = self.dim();
        let mut g = HeadGrad {
            mean: vec![0.0; d],
            log_std: vec![0.0; d],
        };
        for j in 0..d {
            let sigma = self.std(j);
            let z = sample.noise[j];
            let a = sample.action[j];
            let da_du = 1.0 - a * a;
            // d log_prob / du = 2 tanh(u); the -log std term adds -1 to d/dlog_std
            let d_u = d_action[j] * da_du + d_log_prob * 2.0 * a;
            g.mean[j] = d_u;
            let inside = self.log_std[j] > LOG_STD_MIN && self.log_std[j] < LOG_STD_MAX;
            g.log_std[j] = if inside { d_u * sigma * z - d_log_prob } else { 0.0 };
        }
        g
    }

    /// Log-density of a given squashed action.
    pub fn log_prob(&self, action: &[f64]) -> f64 {
        let mut lp = 0.0;
        for (j, &a) in action.iter().enumerate() {
            let a = a.clamp(-1.0 + ACTION_EPS, 1.0 - ACTION_EPS);
            let u = a.atanh();
            let ls = clamp_log_std(self.log_std[j]);
            let z = (u - self.mean[j]) / ls.exp();
            lp += -0.5 * z * z - ls - HALF_LN_2PI - log_one_minus_tanh_sq(u);
        }
        lp
    }

    /// Gradient of `log_prob(action)` w.r.t. (mean, raw log-std).
    pub fn log_prob_grad(&self, action: &[f64]) -> HeadGrad {
        let d = self.dim();
        let mut g = HeadGrad {
            mean: vec![0.0; d],
            log_std: vec![0.0; d],
        };
        for (j, &a) in action.iter().enumerate() {
            let a = a.clamp(-1.0 + ACTION_EPS, 1.0 - ACTION_EPS);
            let u = a.atanh();
            let ls = clamp_log_std(self.log_std[j]);
            let sigma = ls.exp();
            let z = (u - self.mean[j]) / sigma;
            g.mean[j] = z / sigma;
            let inside = self.log_std[j] > LOG_STD_MIN && self.log_std[j] < LOG_STD_MAX;
            g.log_std[j] = if inside { z * z - 1.0 } else { 0.0 };
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_head_zero_noise() {
        let head = GaussianHead::new(vec![0.0], vec![0.0]);
        let s = head.sample_with_noise(&[0.0]);
        assert_eq!(s.action, vec![0.0]);
        // standard normal log density at 0, correction log(1 - 0) = 0
        assert!((s.log_prob + HALF_LN_2PI).abs() < 1e-15);
    }

    #[test]
    fn tiny_std_collapses_to_mode() {
        // log-std below the floor is clamped, so the spread is at most exp(LOG_STD_MIN) |z|
        let head = GaussianHead::new(vec![0.4, -1.3], vec![-50.0, -50.0]);
        let noise = [1.7, -2.2];
        let s = head.sample_with_noise(&noise);
        let mode = head.mode();
        for ((a, m), z) in s.action.iter().zip(&mode).zip(noise) {
            assert!((a - m).abs() <= LOG_STD_MIN.exp() * f64::abs(z));
        }
    }

    #[test]
    fn log_one_minus_tanh_sq_matches_direct() {
        for &u in &[-3.0, -0.5, 0.0, 0.2, 1.0, 4.0] {
            let direct = (1.0 - f64::tanh(u).powi(2)).ln();
            assert!((log_one_minus_tanh_sq(u) - direct).abs() < 1e-12);
        }
        assert!(log_one_minus_tanh_sq(400.0).is_finite());
    }

    #[test]
    fn density_integrates_to_one() {
        // midpoint rule in u-space is far better conditioned than in a-space:
        // integral of p(a) da over (-1, 1) = integral of p(tanh u) (1 - tanh^2 u) du
        for &(m, ls) in &[(0.0, 0.0), (0.8, -1.0), (-1.0, -0.3), (0.3, -3.0)] {
            let head = GaussianHead::new(vec![m], vec![ls]);
            let (lo, hi, n) = (-40.0, 40.0, 400_000);
            let h = (hi - lo) / n as f64;
            let mut total = 0.0;
            for k in 0..n {
                let u = lo + (k as f64 + 0.5) * h;
                let a = f64::tanh(u);
                if a.abs() >= 1.0 - ACTION_EPS {
                    continue;
                }
                total += head.log_prob(&[a]).exp() * (1.0 - a * a) * h;
            }
            assert!((total - 1.0).abs() < 1e-4, "mean {m} log_std {ls}: {total}");
        }
    }

    #[test]
    fn loglik_gradient_at_mode_lowers_log_std() {
        let head = GaussianHead::new(vec![0.25], vec![-0.5]);
        let g = head.log_prob_grad(&head.mode());
        assert!(g.mean[0].abs() < 1e-12);
        assert!((g.log_std[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn sample_backward_matches_finite_differences() {
        let noise = [0.7, -1.1];
        let base = GaussianHead::new(vec![0.3, -0.4], vec![-0.2, 0.1]);
        let (wa, wl) = ([0.5, -1.5], 0.8);
        let f = |h: &GaussianHead| {
            let s = h.sample_with_noise(&noise);
            wa[0] * s.action[0] + wa[1] * s.action[1] + wl * s.log_prob
        };
        let s = base.sample_with_noise(&noise);
        let g = base.sample_backward(&s, &wa, wl);
        let eps = 1e-6;
        for j in 0..2 {
            let mut hp = base.clone();
            let mut hm = base.clone();
            hp.mean[j] += eps;
            hm.mean[j] -= eps;
            let fd = (f(&hp) - f(&hm)) / (2.0 * eps);
            assert!((fd - g.mean[j]).abs() < 1e-7);
            let mut hp = base.clone();
            let mut hm = base.clone();
            hp.log_std[j] += eps;
            hm.log_std[j] -= eps;
            let fd = (f(&hp) - f(&hm)) / (2.0 * eps);
            assert!((fd - g.log_std[j]).abs() < 1e-7);
        }
    }
}
