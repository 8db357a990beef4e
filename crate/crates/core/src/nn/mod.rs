//! Minimal differentiable numerics: MLPs, Adam, Polyak averaging and the
//! tanh-Gaussian policy head.

mod adam;
mod gaussian;
mod mlp;

pub use adam::{adam_step, AdamState, DEFAULT_LR};
pub use gaussian::{
    clamp_log_std, log_one_minus_tanh_sq, GaussianHead, HeadGrad, SquashedSample, ACTION_EPS, LOG_STD_MAX,
    LOG_STD_MIN,
};
pub use mlp::{Architecture, Mlp, OutputActivation, Tape};

use crate::error::{Error, Result};

/// `target <- tau * online + (1 - tau) * target`, element-wise.
pub fn polyak_update(target: &mut [f64], online: &[f64], tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::config(format!("polyak rate must lie in (0, 1], got {tau}")));
    }
    if target.len() != online.len() {
        return Err(Error::config(format!(
            "polyak shape mismatch: target {}, online {}",
            target.len(),
            online.len()
        )));
    }
    let keep = 1.0 - tau;
    for (t, &o) in target.iter_mut().zip(online) {
        *t = tau * o + keep * *t;
    }
    Ok(())
}

/// A scalar loss over a flat parameter vector with an analytic gradient.
pub trait Objective {
    /// Loss value together with per-sample losses (used to locate non-finite entries).
    fn evaluate(&self, params: &[f64]) -> (f64, Vec<f64>);

    fn gradient(&self, params: &[f64]) -> (f64, Vec<f64>);
}

/// Evaluates an objective and its gradient, rejecting non-finite losses.
pub fn value_and_grad<O: Objective + ?Sized>(objective: &O, params: &[f64]) -> Result<(f64, Vec<f64>)> {
    let (loss, grads) = objective.gradient(params);
    if !loss.is_finite() {
        let (_, per_sample) = objective.evaluate(params);
        let idx = per_sample.iter().position(|l| !l.is_finite());
        return Err(Error::numerical(format!("non-finite loss {loss}"), None, idx));
    }
    Ok((loss, grads))
}

/// Central finite-difference gradient of `f` at `params`.
pub fn finite_difference_grad<F: FnMut(&[f64]) -> f64>(mut f: F, params: &[f64], step: f64) -> Vec<f64> {
    let mut p = params.to_vec();
    let mut out = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + step;
        let up = f(&p);
        p[i] = orig - step;
        let down = f(&p);
        p[i] = orig;
        out.push((up - down) / (2.0 * step));
    }
    out
}

/// Largest relative error between two gradients, using `|a - b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn polyak_full_copy() {
        let mut t = vec![3.0, -1.0];
        polyak_update(&mut t, &[0.5, 9.0], 1.0).unwrap();
        assert_eq!(t, vec![0.5, 9.0]);
    }

    #[test]
    fn polyak_midpoint_and_small_rate() {
        let mut t = vec![0.0];
        polyak_update(&mut t, &[2.0], 0.5).unwrap();
        assert_eq!(t, vec![1.0]);
        let mut t = vec![10.0];
        polyak_update(&mut t, &[0.0], 0.005).unwrap();
        assert!((t[0] - 9.95).abs() < 1e-12);
    }

    #[test]
    fn polyak_rejects_bad_rate() {
        let mut t = vec![0.0];
        assert!(polyak_update(&mut t, &[1.0], 0.0).is_err());
        assert!(polyak_update(&mut t, &[1.0], 1.5).is_err());
        assert!(polyak_update(&mut t, &[1.0], f64::NAN).is_err());
    }

    #[test]
    fn polyak_converges_geometrically() {
        let mut t = vec![1.0];
        for k in 1..=50 {
            polyak_update(&mut t, &[0.0], 0.1).unwrap();
            assert!((t[0] - 0.9f64.powi(k)).abs() < 1e-12);
        }
    }

    struct SumOfParams;

    impl Objective for SumOfParams {
        fn evaluate(&self, params: &[f64]) -> (f64, Vec<f64>) {
            (params.iter().sum(), params.to_vec())
        }

        fn gradient(&self, params: &[f64]) -> (f64, Vec<f64>) {
            (params.iter().sum(), vec![1.0; params.len()])
        }
    }

    #[test]
    fn sum_of_params_has_unit_gradient() {
        let (l, g) = value_and_grad(&SumOfParams, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(l, 6.0);
        assert_eq!(g, vec![1.0; 3]);
        let err = value_and_grad(&SumOfParams, &[1.0, f64::INFINITY, 3.0]).unwrap_err();
        assert!(matches!(err, Error::Numerical { batch_index: Some(1), .. }));
    }

    /// 0.5 * mean squared output of a random net on a random batch.
    struct HalfSquaredOutput {
        arch: Architecture,
        x: Array2<f64>,
    }

    impl Objective for HalfSquaredOutput {
        fn evaluate(&self, params: &[f64]) -> (f64, Vec<f64>) {
            let y = self.arch.forward_batch(params, self.x.view()).unwrap();
            let per: Vec<f64> = y.rows().into_iter().map(|r| 0.5 * r.dot(&r)).collect();
            (per.iter().sum::<f64>() / per.len() as f64, per)
        }

        fn gradient(&self, params: &[f64]) -> (f64, Vec<f64>) {
            let tape = self.arch.forward_tape(params, self.x.view()).unwrap();
            let n = self.x.nrows() as f64;
            let d_out = tape.output() / n;
            let mut g = vec![0.0; params.len()];
            self.arch.backward(params, &tape, d_out.view(), Some(&mut g), false);
            let (l, _) = self.evaluate(params);
            (l, g)
        }
    }

    #[test]
    fn random_nets_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..20 {
            let depth = rng.random_range(1..=3);
            let mut widths = vec![rng.random_range(1..=4)];
            for _ in 0..depth {
                widths.push(rng.random_range(1..=8));
            }
            let out = if trial % 2 == 0 {
                OutputActivation::Identity
            } else {
                OutputActivation::Tanh
            };
            let arch = Architecture::new(widths.clone(), out).unwrap();
            let params = arch.init_params(&mut rng);
            let b = rng.random_range(1..=4);
            let x = Array2::from_shape_fn((b, widths[0]), |_| rng.random_range(-1.0..1.0));
            let obj = HalfSquaredOutput { arch, x };
            let (_, g) = value_and_grad(&obj, &params).unwrap();
            let fd = finite_difference_grad(|p| obj.evaluate(p).0, &params, 1e-5);
            let err = max_relative_error(&g, &fd, 1e-6);
            assert!(err < 1e-4, "trial {trial} widths {widths:?}: rel err {err}");
        }
    }
}
