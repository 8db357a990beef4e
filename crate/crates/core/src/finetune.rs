//! Offline-to-online fine-tuning with exponentially decaying BC coefficient.

use std::io::Write;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::agent::{guarded_step, Agent};
use crate::data::{sample_batch, Dataset, ReplayBuffer, Transition, TransitionSource, DEFAULT_CAPACITY, DEFAULT_SEED_TRANSITIONS};
use crate::env::EnvSpec;
use crate::error::{Error, Result};
use crate::eval::{evaluate_policy, normalized_score, ScoreReference};

pub const DEFAULT_DECAY_STEPS: u64 = 50_000;
pub const DEFAULT_WARMUP: u64 = 2500;
pub const DEFAULT_EVAL_EVERY: u64 = 5000;
/// Stand-in for a zero end point when computing the decay rate.
pub const ZERO_BETA_FLOOR: f64 = 1e-12;

/// `exp(ln(beta_end / beta_start) / steps)`.
pub fn decay_rate(beta_start: f64, beta_end: f64, steps: u64) -> Result<f64> {
    if !(beta_start > 0.0 && beta_end > 0.0) || !beta_start.is_finite() || !beta_end.is_finite() {
        return Err(Error::config(format!(
            "decay end points must be positive, got {beta_start} and {beta_end}"
        )));
    }
    if steps == 0 {
        return Err(Error::config("decay steps must be at least 1"));
    }
    Ok(((beta_end / beta_start).ln() / steps as f64).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecaySchedule {
    pub beta_start: f64,
    pub beta_end: f64,
    pub decay_steps: u64,
    pub beta: f64,
    pub kappa: f64,
}

impl DecaySchedule {
    pub fn new(beta_start: f64, beta_end: f64, decay_steps: u64) -> Result<Self> {
        if !(beta_start >= 0.0 && beta_end >= 0.0) || !beta_start.is_finite() || !beta_end.is_finite() {
            return Err(Error::config("beta end points must be finite and non-negative"));
        }
        if beta_end > beta_start {
            return Err(Error::config(format!(
                "beta_end {beta_end} exceeds beta_start {beta_start}"
            )));
        }
        let kappa = if beta_start == 0.0 {
            1.0
        } else {
            decay_rate(beta_start, beta_end.max(ZERO_BETA_FLOOR.min(beta_start)), decay_steps)?
        };
        Ok(Self {
            beta_start,
            beta_end,
            decay_steps,
            beta: beta_start,
            kappa,
        })
    }

    /// `max(beta_end, beta_start * kappa^t)`.
    pub fn closed_form(&self, t: u64) -> f64 {
        self.clamp(self.beta_start * self.kappa.powf(t as f64))
    }

    fn clamp(&self, beta: f64) -> f64 {
        // a zero end point is approached through the floor, then snapped to
        if self.beta_end == 0.0 && beta <= ZERO_BETA_FLOOR * (1.0 + 1e-6) {
            0.0
        } else {
            beta.max(self.beta_end)
        }
    }
}

/// `beta <- max(beta_end, kappa * beta)`.
pub fn decay_step(schedule: &mut DecaySchedule) -> f64 {
    schedule.beta = schedule.clamp(schedule.kappa * schedule.beta);
    schedule.beta
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    /// Defaults to the agent's current β.
    pub beta_start: Option<f64>,
    pub beta_end: f64,
    pub decay_steps: u64,
    /// Environment interactions before the first gradient update.
    pub warmup: u64,
    /// Environment interactions, warmup included.
    pub total_steps: u64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub eval_seed: u64,
    /// Dataset transitions copied into the buffer before interaction.
    pub seed_transitions: usize,
    pub buffer_capacity: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            beta_start: None,
            beta_end: 0.0,
            decay_steps: DEFAULT_DECAY_STEPS,
            warmup: DEFAULT_WARMUP,
            total_steps: 250_000,
            eval_every: DEFAULT_EVAL_EVERY,
            eval_episodes: 10,
            eval_seed: 10_000,
            seed_transitions: DEFAULT_SEED_TRANSITIONS,
            buffer_capacity: DEFAULT_CAPACITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneRow {
    pub step: u64,
    pub eval_score_mean: f64,
    pub eval_score_stderr: f64,
    pub beta: f64,
    pub buffer_size: usize,
    /// Normalized score of every evaluation episode.
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FinetuneLog {
    pub rows: Vec<FinetuneRow>,
    /// Environment interaction at which the first gradient update ran.
    pub first_update_at: Option<u64>,
}

pub const FINETUNE_COLUMNS: [&str; 5] = ["step", "eval_score_mean", "eval_score_stderr", "beta", "buffer_size"];

impl FinetuneLog {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{}", FINETUNE_COLUMNS.join(","))?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.step, r.eval_score_mean, r.eval_score_stderr, r.beta, r.buffer_size
            )?;
        }
        out.flush()?;
        Ok(())
    }
}

fn eval_row<A: Agent + ?Sized>(
    agent: &A,
    env: &EnvSpec,
    config: &FinetuneConfig,
    reference: &ScoreReference,
    step: u64,
    beta: f64,
    buffer_size: usize,
) -> Result<FinetuneRow> {
    let ev = evaluate_policy(agent, env, config.eval_episodes, config.eval_seed)?;
    let scores = ev
        .returns
        .iter()
        .map(|r| normalized_score(*r, reference))
        .collect::<Result<Vec<_>>>()?;
    let (mean, stderr) = crate::eval::mean_stderr(&scores);
    Ok(FinetuneRow {
        step,
        eval_score_mean: mean,
        eval_score_stderr: stderr,
        beta,
        buffer_size,
        scores,
    })
}

/// Interacts with `env`, updating the agent once per interaction after the
/// warmup and decaying β after every update. Offline β inflation is not applied.
pub fn run_finetune<A: Agent + ?Sized>(
    agent: &mut A,
    env: &EnvSpec,
    dataset: &Dataset,
    config: &FinetuneConfig,
    reference: &ScoreReference,
    rng: &mut dyn RngCore,
) -> Result<FinetuneLog> {
    if config.eval_every == 0 {
        return Err(Error::config("eval_every must be positive"));
    }
    if dataset.env().state_dim != env.state_dim || dataset.env().action_dim != env.action_dim {
        return Err(Error::config("dataset does not match the environment"));
    }
    let mut buffer = ReplayBuffer::new(config.buffer_capacity)?;
    buffer.seed_from(dataset, config.seed_transitions.min(dataset.len()))?;
    let mut schedule = DecaySchedule::new(config.beta_start.unwrap_or(agent.beta()), config.beta_end, config.decay_steps)?;
    agent.set_beta(schedule.beta);
    let mut log = FinetuneLog::default();
    log.rows
        .push(eval_row(agent, env, config, reference, 0, schedule.beta, buffer.len())?);

    let mut state = env.reset(rng);
    for t in 1..=config.total_steps {
        let action = agent.act(state.observation(), true, rng)?;
        let out = env.step(&state, &action);
        buffer.push(Transition {
            state: state.observation().to_vec(),
            action,
            reward: out.reward,
            next_state: out.state.observation().to_vec(),
            terminal: out.terminal,
        });
        state = if out.done() { env.reset(rng) } else { out.state };

        if t > config.warmup {
            log.first_update_at.get_or_insert(t);
            let batch = sample_batch(&buffer, agent.batch_size(), dataset.reward_transform, rng)?;
            guarded_step(agent, &batch, schedule.beta, rng)?;
            decay_step(&mut schedule);
            agent.set_beta(schedule.beta);
        }
        if t % config.eval_every == 0 {
            log.rows
                .push(eval_row(agent, env, config, reference, t, schedule.beta, buffer.len())?);
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rate_examples() {
        assert_eq!(decay_rate(0.3, 0.3, 1000).unwrap(), 1.0);
        let k = decay_rate(0.1, 0.05, 50_000).unwrap();
        assert_eq!(k, (0.5f64.ln() / 50_000.0).exp());
        assert!((0.1 * k.powi(50_000) - 0.05).abs() / 0.05 < 1e-12);
        assert!((decay_rate(0.4, 0.1, 1).unwrap() - 0.25).abs() < 1e-15);
        assert!(decay_rate(0.0, 0.1, 10).is_err());
        assert!(decay_rate(0.1, -1.0, 10).is_err());
        assert!(decay_rate(0.1, 0.01, 0).is_err());
    }

    #[test]
    fn schedule_lands_and_pins() {
        let mut s = DecaySchedule::new(0.5, 0.01, 200).unwrap();
        let mut prev = s.beta;
        for _ in 0..200 {
            let b = decay_step(&mut s);
            assert!(b <= prev && b >= 0.01);
            prev = b;
        }
        assert!((s.beta - 0.01).abs() / 0.01 < 1e-9);
        for _ in 0..50 {
            decay_step(&mut s);
        }
        assert_eq!(s.beta, 0.01);
    }

    #[test]
    fn unit_kappa_keeps_beta() {
        let mut s = DecaySchedule::new(0.2, 0.2, 10).unwrap();
        for _ in 0..20 {
            assert_eq!(decay_step(&mut s), 0.2);
        }
    }

    #[test]
    fn zero_end_points() {
        let mut s = DecaySchedule::new(0.0, 0.0, 10).unwrap();
        assert_eq!(s.kappa, 1.0);
        assert_eq!(decay_step(&mut s), 0.0);
        let mut s = DecaySchedule::new(0.04, 0.0, 1000).unwrap();
        for _ in 0..1000 {
            decay_step(&mut s);
        }
        assert_eq!(s.beta, 0.0);
        assert_eq!(s.closed_form(1000), 0.0);
        assert!(s.closed_form(999) > 0.0);
        assert!(DecaySchedule::new(0.1, 0.2, 10).is_err());
    }
}
