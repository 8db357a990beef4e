//! TD3-BC-N: deterministic actor, N-critic ensemble, BC-regularized actor loss.

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::agent::{
    Agent, AgentKind, PolicyStats, StepStats, DEFAULT_DIVERGENCE_CEILING, DEFAULT_INFLATION_FACTOR,
    DEFAULT_INFLATION_STEPS,
};
use crate::checkpoint::{Decoder, Encoder};
use crate::critic::{critic_input, q_scale, CriticEnsemble, TargetMode, Q_SCALE_FLOOR};
use crate::data::{Batch, StateNormalizer, DEFAULT_BATCH_SIZE};
use crate::error::{Error, Result};
use crate::nn::{adam_step, polyak_update, AdamState, Architecture, Mlp, OutputActivation, DEFAULT_LR};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Td3Config {
    pub ensemble_size: usize,
    pub gamma: f64,
    pub tau: f64,
    pub policy_noise: f64,
    pub noise_clip: f64,
    /// Critic updates per actor update.
    pub policy_freq: u64,
    pub beta: f64,
    pub target_mode: TargetMode,
    pub exploration_noise: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub batch_size: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub inflation_factor: f64,
    pub inflation_steps: u64,
    pub divergence_ceiling: f64,
}

impl Default for Td3Config {
    fn default() -> Self {
        Self {
            ensemble_size: 10,
            gamma: 0.99,
            tau: 0.005,
            policy_noise: 0.2,
            noise_clip: 0.5,
            policy_freq: 2,
            beta: 0.04,
            target_mode: TargetMode::Shared,
            exploration_noise: 0.1,
            actor_lr: DEFAULT_LR,
            critic_lr: DEFAULT_LR,
            batch_size: DEFAULT_BATCH_SIZE,
            hidden_width: 256,
            hidden_layers: 3,
            inflation_factor: DEFAULT_INFLATION_FACTOR,
            inflation_steps: DEFAULT_INFLATION_STEPS,
            divergence_ceiling: DEFAULT_DIVERGENCE_CEILING,
        }
    }
}

impl Td3Config {
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
        if self.policy_noise < 0.0 || self.noise_clip < 0.0 || self.exploration_noise < 0.0 {
            return bad("noise scales must be non-negative");
        }
        if self.policy_freq == 0 || self.batch_size == 0 || self.hidden_width == 0 {
            return bad("policy_freq, batch_size and hidden_width must be positive");
        }
        if self.inflation_factor < 0.0 || self.divergence_ceiling <= 0.0 {
            return bad("inflation_factor and divergence_ceiling must be positive");
        }
        Ok(())
    }
}

/// Outcome of evaluating the actor loss on a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Td3PolicyLoss {
    pub stats: PolicyStats,
    /// The normalization factor that was used.
    pub q_scale: f64,
    pub grad: Vec<f64>,
}

/// Actor loss `-lambda * mean(min_i Q_i(s, pi(s))) + beta * mse(pi(s), a)` and its gradient.
///
/// `states` are normalized. With `fixed_scale` the normalization factor is
/// taken as given, otherwise it is computed from the batch. Either way it
/// carries no gradient.
pub fn td3_policy_loss(
    arch: &Architecture,
    params: &[f64],
    critics: &CriticEnsemble,
    states: ArrayView2<f64>,
    data_actions: ArrayView2<f64>,
    beta: f64,
    fixed_scale: Option<f64>,
) -> Result<Td3PolicyLoss> {
    let tape = arch.forward_tape(params, states)?;
    let pi = tape.output();
    let (b, a_dim) = pi.dim();
    let g = critics.min_q_action_grad(states, pi.view(), Array1::ones(b).view())?;
    let (scale, guarded) = match fixed_scale {
        Some(s) => (s, false),
        None => q_scale(g.q_min.view(), Q_SCALE_FLOOR),
    };
    let q_min_mean = g.q_min.mean().unwrap_or(0.0);
    let q_term = scale * q_min_mean;
    let diff = pi - &data_actions;
    let bc = diff.iter().map(|d| d * d).sum::<f64>() / (b * a_dim) as f64;
    let loss = -q_term + beta * bc;

    let d_pi = g.d_actions * (-scale / b as f64) + diff * (2.0 * beta / (b * a_dim) as f64);
    let mut grad = vec![0.0; params.len()];
    arch.backward(params, &tape, d_pi.view(), Some(&mut grad), false);
    Ok(Td3PolicyLoss {
        stats: PolicyStats {
            loss,
            bc_term: bc,
            q_term,
            q_min_mean,
            scale_guarded: guarded,
        },
        q_scale: scale,
        grad,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Td3BcnAgent {
    pub config: Td3Config,
    state_dim: usize,
    action_dim: usize,
    normalizer: StateNormalizer,
    pub policy: Mlp,
    pub policy_target: Mlp,
    pub policy_opt: AdamState,
    pub critics: CriticEnsemble,
    steps: u64,
}

impl Td3BcnAgent {
    pub fn new<R: Rng + ?Sized>(
        config: Td3Config,
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
            action_dim,
            OutputActivation::Tanh,
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
            policy_target: policy.clone(),
            policy_opt: AdamState::new(policy.num_params(), config.actor_lr),
            policy,
            critics,
            config,
            state_dim,
            action_dim,
            normalizer,
            steps: 0,
        })
    }

    fn normalized(&self, states: &Array2<f64>) -> Array2<f64> {
        let mut s = states.clone();
        self.normalizer.normalize_rows(&mut s);
        s
    }

    /// Smoothed target actions for normalized next states.
    pub fn target_actions<R: Rng + ?Sized>(&self, next_states: ArrayView2<f64>, rng: &mut R) -> Result<Array2<f64>> {
        let mut a = self.policy_target.forward_batch(next_states)?;
        if self.config.policy_noise > 0.0 {
            let noise = Normal::new(0.0, self.config.policy_noise).expect("valid std");
            let c = self.config.noise_clip;
            a.mapv_inplace(|v| (v + noise.sample(rng).clamp(-c, c)).clamp(-1.0, 1.0));
        } else {
            a.mapv_inplace(|v| v.clamp(-1.0, 1.0));
        }
        Ok(a)
    }

    /// Single-state form of [`Self::target_actions`] on a raw next state.
    pub fn target_action<R: Rng + ?Sized>(&self, next_state: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let s = self.normalizer.normalize(next_state);
        let view = ArrayView2::from_shape((1, s.len()), &s).map_err(|e| Error::config(e.to_string()))?;
        Ok(self.target_actions(view, rng)?.into_raw_vec_and_offset().0)
    }

    /// Bootstrap targets, shape `(members, batch)`; shared mode repeats one row.
    pub fn critic_targets<R: Rng + ?Sized>(&self, batch: &Batch, mode: TargetMode, rng: &mut R) -> Result<Array2<f64>> {
        let next = self.normalized(&batch.next_states);
        let a_next = self.target_actions(next.view(), rng)?;
        let tq = self.critics.target_q_values(critic_input(next.view(), a_next.view()).view())?;
        bootstrap(&tq, batch, self.config.gamma, mode, None)
    }

    /// One Adam step per critic member; returns the per-member losses.
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

    /// One Adam step on the actor.
    pub fn policy_update(&mut self, batch: &Batch, beta: f64) -> Result<PolicyStats> {
        if batch.is_empty() {
            return Err(Error::State("policy update on an empty batch".into()));
        }
        let states = self.normalized(&batch.states);
        let out = td3_policy_loss(
            self.policy.arch(),
            self.policy.params(),
            &self.critics,
            states.view(),
            batch.actions.view(),
            beta,
            None,
        )?;
        if !out.stats.loss.is_finite() {
            return Err(Error::numerical("non-finite policy loss", None, None));
        }
        adam_step(self.policy.params_mut(), &out.grad, &mut self.policy_opt)?;
        Ok(out.stats)
    }

    pub fn soft_update_targets(&mut self) -> Result<()> {
        self.critics.soft_update(self.config.tau)?;
        polyak_update(self.policy_target.params_mut(), self.policy.params(), self.config.tau)
    }

    /// `clamp(pi(s) + N(0, sigma), -1, 1)` for a raw state.
    pub fn select_action<R: Rng + ?Sized>(&self, state: &[f64], sigma: f64, rng: &mut R) -> Result<Vec<f64>> {
        let mut a = self.policy.forward(&self.normalizer.normalize(state))?;
        if sigma > 0.0 {
            let noise = Normal::new(0.0, sigma).map_err(|e| Error::config(e.to_string()))?;
            for v in &mut a {
                *v = (*v + noise.sample(rng)).clamp(-1.0, 1.0);
            }
        }
        Ok(a)
    }

    pub(crate) fn decode(dec: &mut Decoder<'_>) -> Result<Self> {
        let config: Td3Config = toml::from_str(&dec.str()?).map_err(|e| Error::format(e.to_string()))?;
        config.validate()?;
        let state_dim = dec.u64()? as usize;
        let action_dim = dec.u64()? as usize;
        let steps = dec.u64()?;
        let normalizer = dec.normalizer()?;
        let policy = dec.mlp()?;
        let policy_target = dec.mlp()?;
        let policy_opt = dec.adam()?;
        let critics = dec.critics()?;
        let arch_ok = policy.arch() == policy_target.arch()
            && policy.arch().input_dim() == state_dim
            && policy.arch().output_dim() == action_dim
            && policy_opt.len() == policy.num_params()
            && critics.state_dim() == state_dim
            && critics.action_dim() == action_dim
            && normalizer.dim() == state_dim;
        if !arch_ok {
            return Err(Error::format("inconsistent TD3-BC-N checkpoint"));
        }
        Ok(Self {
            config,
            state_dim,
            action_dim,
            normalizer,
            policy,
            policy_target,
            policy_opt,
            critics,
            steps,
        })
    }
}

/// `r + gamma * (1 - d) * next` with `next` the ensemble minimum (shared) or
/// each member's own value (independent), minus an optional per-sample entropy bonus.
pub(crate) fn bootstrap(
    tq: &Array2<f64>,
    batch: &Batch,
    gamma: f64,
    mode: TargetMode,
    entropy: Option<&Array1<f64>>,
) -> Result<Array2<f64>> {
    let n = tq.nrows();
    let mut next = match mode {
        TargetMode::Shared => {
            let (m, _) = crate::critic::min_over_members(tq);
            let mut rows = Array2::zeros(tq.dim());
            rows.axis_iter_mut(Axis(0)).for_each(|mut r| r.assign(&m));
            rows
        }
        TargetMode::Independent => tq.clone(),
    };
    if let Some(e) = entropy {
        next -= e;
    }
    let y = next * &(&batch.not_done * gamma) + &batch.rewards;
    for i in 0..n {
        if let Some(b) = y.row(i).iter().position(|v| !v.is_finite()) {
            return Err(Error::numerical("non-finite critic target", Some(i), Some(b)));
        }
    }
    Ok(y)
}

impl Agent for Td3BcnAgent {
    fn kind(&self) -> AgentKind {
        AgentKind::Td3Bcn
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

    fn train_step(&mut self, batch: &Batch, beta: f64, rng: &mut dyn RngCore) -> Result<StepStats> {
        let critic_losses = self.critic_update(batch, self.config.target_mode, rng)?;
        let mut policy = None;
        if (self.steps + 1).is_multiple_of(self.config.policy_freq) {
            policy = Some(self.policy_update(batch, beta)?);
            self.soft_update_targets()?;
        }
        self.steps += 1;
        Ok(StepStats {
            critic_losses,
            policy,
            alpha: None,
            entropy: None,
        })
    }

    fn act(&self, state: &[f64], explore: bool, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        let sigma = if explore { self.config.exploration_noise } else { 0.0 };
        self.select_action(state, sigma, rng)
    }

    fn policy_actions(&self, states: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.policy.forward_batch(states)
    }

    fn write_checkpoint(&self, out: &mut dyn Write) -> Result<()> {
        let mut enc = Encoder::new(out);
        enc.header(AgentKind::Td3Bcn)?;
        enc.str(&toml::to_string(&self.config).map_err(|e| Error::format(e.to_string()))?)?;
        enc.u64(self.state_dim as u64)?;
        enc.u64(self.action_dim as u64)?;
        enc.u64(self.steps)?;
        enc.normalizer(&self.normalizer)?;
        enc.mlp(&self.policy)?;
        enc.mlp(&self.policy_target)?;
        enc.adam(&self.policy_opt)?;
        enc.critics(&self.critics)
    }
}
