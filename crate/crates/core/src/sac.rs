//! SAC-BC-N: tanh-Gaussian actor, N-critic ensemble, learned entropy coefficient.

use std::io::Write;

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::agent::{
    Agent, AgentKind, PolicyStats, StepStats, DEFAULT_DIVERGENCE_CEILING, DEFAULT_INFLATION_FACTOR,
    DEFAULT_INFLATION_STEPS,
};
use crate::checkpoint::{Decoder, Encoder};
use crate::critic::{critic_input, q_scale, CriticEnsemble, TargetMode, Q_SCALE_FLOOR};
use crate::data::{Batch, StateNormalizer, DEFAULT_BATCH_SIZE};
use crate::error::{Error, Result};
use crate::nn::{adam_step, AdamState, Architecture, GaussianHead, Mlp, OutputActivation, SquashedSample, DEFAULT_LR};
use crate::td3::bootstrap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BcForm {
    /// Squared error between `tanh(mean)` and the data action.
    Mse,
    /// Negative log-likelihood of the data action.
    Loglik,
}

impl BcForm {
    pub fn as_str(self) -> &'static str {
        match self {
            BcForm::Mse => "mse",
            BcForm::Loglik => "loglik",
        }
    }
}

impl std::str::FromStr for BcForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(BcForm::Mse),
            "loglik" => Ok(BcForm::Loglik),
            other => Err(Error::config(format!("unknown bc form {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SacConfig {
    pub ensemble_size: usize,
    pub gamma: f64,
    pub tau: f64,
    pub beta: f64,
    pub bc_form: BcForm,
    pub target_mode: TargetMode,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    pub initial_alpha: f64,
    /// Entropy target; defaults to `-action_dim`.
    pub target_entropy: Option<f64>,
    pub batch_size: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub inflation_factor: f64,
    pub inflation_steps: u64,
    pub divergence_ceiling: f64,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            ensemble_size: 10,
            gamma: 0.99,
            tau: 0.005,
            beta: 0.04,
            bc_form: BcForm::Mse,
            target_mode: TargetMode::Shared,
            actor_lr: DEFAULT_LR,
            critic_lr: DEFAULT_LR,
            alpha_lr: DEFAULT_LR,
            initial_alpha: 1.0,
            target_entropy: None,
            batch_size: DEFAULT_BATCH_SIZE,
            hidden_width: 256,
            hidden_layers: 3,
            inflation_factor: DEFAULT_INFLATION_FACTOR,
            inflation_steps: DEFAULT_INFLATION_STEPS,
            divergence_ceiling: DEFAULT_DIVERGENCE_CEILING,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if self.ensemble_size == 0 {
            return bad("ensemble_size must be at least 1");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be finite and non-negative");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(self.initial_alpha > 0.0 && self.initial_alpha.is_finite()) {
            return bad("initial_alpha must be positive");
        }
        if self.batch_size == 0 || self.hidden_width == 0 {
            return bad("batch_size and hidden_width must be positive");
        }
        if self.inflation_factor < 0.0 || self.divergence_ceiling <= 0.0 {
            return bad("inflation_factor and divergence_ceiling must be positive");
        }
        Ok(())
    }
}

fn head_at(out: &Array2<f64>, row: usize, a_dim: usize) -> GaussianHead {
    GaussianHead::new(
        out.slice(s![row, ..a_dim]).to_vec(),
        out.slice(s![row, a_dim..]).to_vec(),
    )
}

/// Reparameterized draws for every row of a head-output matrix.
pub fn sample_rows(out: &Array2<f64>, noise: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>, Vec<SquashedSample>) {
    let (b, a_dim) = noise.dim();
    let mut actions = Array2::zeros((b, a_dim));
    let mut log_probs = Array1::zeros(b);
    let mut samples = Vec::with_capacity(b);
    for r in 0..b {
        let smp = head_at(out, r, a_dim).sample_with_noise(noise.row(r).as_slice().expect("standard layout"));
        actions.row_mut(r).assign(&Array1::from(smp.action.clone()));
        log_probs[r] = smp.log_prob;
        samples.push(smp);
    }
    (actions, log_probs, samples)
}

fn standard_noise<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SacPolicyLoss {
    pub stats: PolicyStats,
    /// `alpha * mean(log pi(a_p|s))`.
    pub entropy_term: f64,
    pub log_probs: Array1<f64>,
    pub q_scale: f64,
    pub grad: Vec<f64>,
}

/// Actor loss `-lambda * mean(min_i Q_i(s, a_p)) + alpha * mean(log pi(a_p|s)) + beta * bc`
/// with `a_p` drawn from the fixed `noise`. `bc` is the squared error of the
/// mean action (mse) or the negative log-likelihood of the data action (loglik).
#[allow(clippy::too_many_arguments)]
pub fn sac_policy_loss(
    arch: &Architecture,
    params: &[f64],
    critics: &CriticEnsemble,
    states: ArrayView2<f64>,
    data_actions: ArrayView2<f64>,
    noise: ArrayView2<f64>,
    alpha: f64,
    beta: f64,
    bc_form: BcForm,
    fixed_scale: Option<f64>,
) -> Result<SacPolicyLoss> {
    let tape = arch.forward_tape(params, states)?;
    let out = tape.output();
    let (b, a_dim) = data_actions.dim();
    let bf = b as f64;
    let (a_p, log_probs, samples) = sample_rows(out, noise);
    let weights = Array1::ones(b);
    let mut g = critics.min_q_action_grad(states, a_p.view(), weights.view())?;
    let (scale, guarded) = match fixed_scale {
        Some(s) => (s, false),
        None => q_scale(g.q_min.view(), Q_SCALE_FLOOR),
    };
    // the weights only enter linearly, so rescale instead of recomputing
    g.d_actions *= -scale / bf;
    let q_min_mean = g.q_min.mean().unwrap_or(0.0);
    let q_term = scale * q_min_mean;
    let entropy_term = alpha * log_probs.mean().unwrap_or(0.0);

    let mut d_out = Array2::zeros(out.dim());
    let mut bc = 0.0;
    for r in 0..b {
        let head = head_at(out, r, a_dim);
        let hg = head.sample_backward(&samples[r], g.d_actions.row(r).as_slice().unwrap(), alpha / bf);
        for j in 0..a_dim {
            d_out[[r, j]] += hg.mean[j];
            d_out[[r, a_dim + j]] += hg.log_std[j];
        }
        let data = data_actions.row(r).to_vec();
        match bc_form {
            BcForm::Mse => {
                for j in 0..a_dim {
                    let m = head.mean[j].tanh();
                    let d = m - data[j];
                    bc += d * d;
                    d_out[[r, j]] += beta * 2.0 * d * (1.0 - m * m) / (bf * a_dim as f64);
                }
            }
            BcForm::Loglik => {
                bc -= head.log_prob(&data);
                let lg = head.log_prob_grad(&data);
                for j in 0..a_dim {
                    d_out[[r, j]] -= beta * lg.mean[j] / bf;
                    d_out[[r, a_dim + j]] -= beta * lg.log_std[j] / bf;
                }
            }
        }
    }
    bc /= match bc_form {
        BcForm::Mse => bf * a_dim as f64,
        BcForm::Loglik => bf,
    };
    let loss = -q_term + entropy_term + beta * bc;
    let mut grad = vec![0.0; params.len()];
    arch.backward(params, &tape, d_out.view(), Some(&mut grad), false);
    Ok(SacPolicyLoss {
        stats: PolicyStats {
            loss,
            bc_term: bc,
            q_term,
            q_min_mean,
            scale_guarded: guarded,
        },
        entropy_term,
        log_probs,
        q_scale: scale,
        grad,
    })
}

/// Entropy-coefficient loss `-alpha * mean(log pi + H)` with `alpha = exp(log_alpha)`,
/// and its derivative w.r.t. `log_alpha`. Minimizing it ascends `alpha * (log pi + H)`.
pub fn entropy_loss(log_alpha: f64, log_probs: &[f64], target_entropy: f64) -> (f64, f64) {
    let alpha = log_alpha.exp();
    let c = log_probs.iter().map(|l| l + target_entropy).sum::<f64>() / log_probs.len() as f64;
    (-alpha * c, -alpha * c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SacBcnAgent {
    pub config: SacConfig,
    state_dim: usize,
    action_dim: usize,
    normalizer: StateNormalizer,
    pub policy: Mlp,
    pub policy_opt: AdamState,
    pub critics: CriticEnsemble,
    pub log_alpha: f64,
    pub alpha_opt: AdamState,
    steps: u64,
}

impl SacBcnAgent {
    pub fn new<R: Rng + ?Sized>(
        config: SacConfig,
        state_dim: usize,
        action_dim: usize,
        normalizer: StateNormalizer,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if normalizer.dim() != state_dim {
            return Err(Error::config("normalizer dimension does not match state_dim"));
        }
        let arch = Architecture::with_hidden(
            state_dim,
            config.hidden_width,
            config.hidden_layers,
            2 * action_dim,
            OutputActivation::Identity,
        )?;
        let policy = Mlp::new(arch, rng);
        let critics = CriticEnsemble::new(
            config.ensemble_size,
            state_dim,
            action_dim,
            config.hidden_width,
            config.hidden_layers,
            config.critic_lr,
            rng,
        )?;
        Ok(Self {
            policy_opt: AdamState::new(policy.num_params(), config.actor_lr),
            policy,
            critics,
            log_alpha: config.initial_alpha.ln(),
            alpha_opt: AdamState::new(1, config.alpha_lr),
            config,
            state_dim,
            action_dim,
            normalizer,
            steps: 0,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn target_entropy(&self) -> f64 {
        self.config.target_entropy.unwrap_or(-(self.action_dim as f64))
    }

    fn normalized(&self, states: &Array2<f64>) -> Array2<f64> {
        let mut s = states.clone();
        self.normalizer.normalize_rows(&mut s);
        s
    }

    /// Fresh policy draws `(actions, log_probs)` at normalized states.
    pub fn sample_actions<R: Rng + ?Sized>(&self, states: ArrayView2<f64>, rng: &mut R) -> Result<(Array2<f64>, Array1<f64>)> {
        let out = self.policy.forward_batch(states)?;
        let noise = standard_noise(states.nrows(), self.action_dim, rng);
        let (a, lp, _) = sample_rows(&out, noise.view());
        Ok((a, lp))
    }

    /// Soft bootstrap targets, shape `(members, batch)`.
    pub fn critic_targets<R: Rng + ?Sized>(&self, batch: &Batch, mode: TargetMode, rng: &mut R) -> Result<Array2<f64>> {
        let next = self.normalized(&batch.next_states);
        let (a_next, lp_next) = self.sample_actions(next.view(), rng)?;
        let tq = self.critics.target_q_values(critic_input(next.view(), a_next.view()).view())?;
        bootstrap(&tq, batch, self.config.gamma, mode, Some(&(lp_next * self.alpha())))
    }

    pub fn critic_update<R: Rng + ?Sized>(&mut self, batch: &Batch, mode: TargetMode, rng: &mut R) -> Result<Vec<f64>> {
        if batch.is_empty() {
            return Err(Error::State("critic update on an empty batch".into()));
        }
        let y = self.critic_targets(batch, mode, rng)?;
        let states = self.normalized(&batch.states);
        let input = critic_input(states.view(), batch.actions.view());
        (0..self.critics.len())
            .map(|i| self.critics.update_member(i, input.view(), y.row(i)))
            .collect()
    }

    /// One Adam step on the actor; also returns the entropy estimate `-mean log pi`.
    pub fn policy_update<R: Rng + ?Sized>(&mut self, batch: &Batch, beta: f64, rng: &mut R) -> Result<(PolicyStats, f64)> {
        if batch.is_empty() {
            return Err(Error::State("policy update on an empty batch".into()));
        }
        let states = self.normalized(&batch.states);
        let noise = standard_noise(batch.len(), self.action_dim, rng);
        let out = sac_policy_loss(
            self.policy.arch(),
            self.policy.params(),
            &self.critics,
            states.view(),
            batch.actions.view(),
            noise.view(),
            self.alpha(),
            beta,
            self.config.bc_form,
            None,
        )?;
        if !out.stats.loss.is_finite() {
            return Err(Error::numerical("non-finite policy loss", None, None));
        }
        adam_step(self.policy.params_mut(), &out.grad, &mut self.policy_opt)?;
        let entropy = -out.log_probs.mean().unwrap_or(0.0);
        Ok((out.stats, entropy))
    }

    /// One Adam step on `log alpha` using fresh draws from the current policy.
    pub fn entropy_update<R: Rng + ?Sized>(&mut self, batch: &Batch, rng: &mut R) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::State("entropy update on an empty batch".into()));
        }
        let states = self.normalized(&batch.states);
        let (_, lp) = self.sample_actions(states.view(), rng)?;
        let (_, g) = entropy_loss(self.log_alpha, lp.as_slice().unwrap(), self.target_entropy());
        let mut p = [self.log_alpha];
        adam_step(&mut p, &[g], &mut self.alpha_opt)?;
        if !p[0].is_finite() {
            return Err(Error::numerical("non-finite log alpha", None, None));
        }
        self.log_alpha = p[0];
        Ok(self.alpha())
    }

    /// Sample mode draws from the policy; mean mode returns `tanh(mean)`.
    pub fn select_action<R: Rng + ?Sized>(&self, state: &[f64], sample: bool, rng: &mut R) -> Result<Vec<f64>> {
        let out = self.policy.forward(&self.normalizer.normalize(state))?;
        let head = GaussianHead::new(out[..self.action_dim].to_vec(), out[self.action_dim..].to_vec());
        Ok(if sample { head.sample(rng).action } else { head.mode() })
    }

    pub(crate) fn decode(dec: &mut Decoder<'_>) -> Result<Self> {
        let config: SacConfig = toml::from_str(&dec.str()?).map_err(|e| Error::format(e.to_string()))?;
        config.validate()?;
        let state_dim = dec.u64()? as usize;
        let action_dim = dec.u64()? as usize;
        let steps = dec.u64()?;
        let normalizer = dec.normalizer()?;
        let policy = dec.mlp()?;
        let policy_opt = dec.adam()?;
        let critics = dec.critics()?;
        let log_alpha = dec.f64()?;
        let alpha_opt = dec.adam()?;
        let ok = policy.arch().input_dim() == state_dim
            && policy.arch().output_dim() == 2 * action_dim
            && policy_opt.len() == policy.num_params()
            && critics.state_dim() == state_dim
            && critics.action_dim() == action_dim
            && normalizer.dim() == state_dim
            && alpha_opt.len() == 1
            && log_alpha.is_finite();
        if !ok {
            return Err(Error::format("inconsistent SAC-BC-N checkpoint"));
        }
        Ok(Self {
            config,
            state_dim,
            action_dim,
            normalizer,
            policy,
            policy_opt,
            critics,
            log_alpha,
            alpha_opt,
            steps,
        })
    }
}

impl Agent for SacBcnAgent {
    fn kind(&self) -> AgentKind {
        AgentKind::SacBcn
    }

    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn normalizer(&self) -> &StateNormalizer {
        &self.normalizer
    }

    fn critics(&self) -> &CriticEnsemble {
        &self.critics
    }

    fn gradient_steps(&self) -> u64 {
        self.steps
    }

    fn batch_size(&self) -> usize {
        self.config.batch_size
    }

    fn beta(&self) -> f64 {
        self.config.beta
    }

    fn set_beta(&mut self, beta: f64) {
        self.config.beta = beta;
    }

    fn inflation(&self) -> (f64, u64) {
        (self.config.inflation_factor, self.config.inflation_steps)
    }

    fn divergence_ceiling(&self) -> f64 {
        self.config.divergence_ceiling
    }

    fn target_mode(&self) -> TargetMode {
        self.config.target_mode
    }

    fn bc_form_label(&self) -> Option<&'static str> {
        Some(self.config.bc_form.as_str())
    }

    fn train_step(&mut self, batch: &Batch, beta: f64, rng: &mut dyn RngCore) -> Result<StepStats> {
        let critic_losses = self.critic_update(batch, self.config.target_mode, rng)?;
        let (policy, entropy) = self.policy_update(batch, beta, rng)?;
        let alpha = self.entropy_update(batch, rng)?;
        self.critics.soft_update(self.config.tau)?;
        self.steps += 1;
        Ok(StepStats {
            critic_losses,
            policy: Some(policy),
            alpha: Some(alpha),
            entropy: Some(entropy),
        })
    }

    fn act(&self, state: &[f64], explore: bool, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        self.select_action(state, explore, rng)
    }

    fn policy_actions(&self, states: ArrayView2<f64>) -> Result<Array2<f64>> {
        let out = self.policy.forward_batch(states)?;
        Ok(out.slice(s![.., ..self.action_dim]).mapv(f64::tanh))
    }

    fn write_checkpoint(&self, out: &mut dyn Write) -> Result<()> {
        let mut enc = Encoder::new(out);
        enc.header(AgentKind::SacBcn)?;
        enc.str(&toml::to_string(&self.config).map_err(|e| Error::format(e.to_string()))?)?;
        enc.u64(self.state_dim as u64)?;
        enc.u64(self.action_dim as u64)?;
        enc.u64(self.steps)?;
        enc.normalizer(&self.normalizer)?;
        enc.mlp(&self.policy)?;
        enc.adam(&self.policy_opt)?;
        enc.critics(&self.critics)?;
        enc.f64(self.log_alpha)?;
        enc.adam(&self.alpha_opt)
    }
}
