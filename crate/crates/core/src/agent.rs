//! What the training loops, fine-tuning and experiments need from an agent.

use std::fmt;
use std::io::Write;

use ndarray::{Array2, ArrayView2};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::critic::{CriticEnsemble, TargetMode};
use crate::data::{sample_batch, Batch, Dataset, StateNormalizer};
use crate::error::{DivergenceReport, Error, Result};
use crate::sac::SacBcnAgent;
use crate::td3::Td3BcnAgent;

pub const DEFAULT_DIVERGENCE_CEILING: f64 = 1e6;
pub const DEFAULT_INFLATION_FACTOR: f64 = 10.0;
pub const DEFAULT_INFLATION_STEPS: u64 = 50_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AgentKind {
    #[serde(rename = "td3-bc-n")]
    Td3Bcn,
    #[serde(rename = "sac-bc-n")]
    SacBcn,
}

impl AgentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AgentKind::Td3Bcn => "td3-bc-n",
            AgentKind::SacBcn => "sac-bc-n",
        }
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AgentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "td3-bc-n" | "td3" => Ok(AgentKind::Td3Bcn),
            "sac-bc-n" | "sac" => Ok(AgentKind::SacBcn),
            other => Err(Error::config(format!("unknown agent {other:?}"))),
        }
    }
}

/// Quantities reported by one policy update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyStats {
    pub loss: f64,
    pub bc_term: f64,
    /// Normalized Q term, `lambda * mean(min_i Q_i)`.
    pub q_term: f64,
    pub q_min_mean: f64,
    /// True when the normalization denominator hit its floor.
    pub scale_guarded: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub critic_losses: Vec<f64>,
    pub policy: Option<PolicyStats>,
    pub alpha: Option<f64>,
    pub entropy: Option<f64>,
}

impl StepStats {
    pub fn critic_loss_mean(&self) -> f64 {
        self.critic_losses.iter().sum::<f64>() / self.critic_losses.len() as f64
    }
}

pub trait Agent {
    fn kind(&self) -> AgentKind;
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn normalizer(&self) -> &StateNormalizer;
    fn critics(&self) -> &CriticEnsemble;
    /// Gradient steps taken so far (offline and online).
    fn gradient_steps(&self) -> u64;
    fn batch_size(&self) -> usize;
    /// Current (un-inflated) BC coefficient.
    fn beta(&self) -> f64;
    fn set_beta(&mut self, beta: f64);
    fn inflation(&self) -> (f64, u64);
    fn divergence_ceiling(&self) -> f64;
    fn target_mode(&self) -> TargetMode;
    /// Extra metrics label, e.g. the BC form.
    fn bc_form_label(&self) -> Option<&'static str> {
        None
    }

    /// One gradient step with an explicit BC coefficient.
    fn train_step(&mut self, batch: &Batch, beta: f64, rng: &mut dyn RngCore) -> Result<StepStats>;

    /// Environment action for a raw state; `explore` selects the behaviour policy.
    fn act(&self, state: &[f64], explore: bool, rng: &mut dyn RngCore) -> Result<Vec<f64>>;

    /// Deterministic evaluation actions for normalized states.
    fn policy_actions(&self, states: ArrayView2<f64>) -> Result<Array2<f64>>;

    fn write_checkpoint(&self, out: &mut dyn Write) -> Result<()>;

    /// BC coefficient used by offline training at the next step.
    fn offline_beta(&self) -> f64 {
        let (factor, steps) = self.inflation();
        inflated_beta(self.beta(), factor, steps, self.gradient_steps())
    }
}

/// `factor * beta` while `step < inflation_steps`, `beta` afterwards.
pub fn inflated_beta(beta: f64, factor: f64, inflation_steps: u64, step: u64) -> f64 {
    if step < inflation_steps {
        factor * beta
    } else {
        beta
    }
}

/// Either agent, for code that loads checkpoints of unknown kind.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyAgent {
    Td3(Td3BcnAgent),
    Sac(SacBcnAgent),
}

impl AnyAgent {
    pub fn as_dyn(&self) -> &dyn Agent {
        match self {
            AnyAgent::Td3(a) => a,
            AnyAgent::Sac(a) => a,
        }
    }

    pub fn as_dyn_mut(&mut self) -> &mut dyn Agent {
        match self {
            AnyAgent::Td3(a) => a,
            AnyAgent::Sac(a) => a,
        }
    }
}

/// One aggregated metrics row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub critic_loss_mean: f64,
    pub policy_loss: f64,
    pub bc_term: f64,
    pub q_term: f64,
    pub beta_effective: f64,
    pub q_min_mean: f64,
    pub alpha: Option<f64>,
    pub policy_entropy_estimate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLog {
    pub kind: AgentKind,
    pub bc_form: Option<&'static str>,
    pub rows: Vec<MetricsRow>,
    /// Policy updates whose normalization denominator was floored.
    pub guarded_updates: u64,
}

pub const TD3_COLUMNS: [&str; 7] = [
    "step",
    "critic_loss_mean",
    "policy_loss",
    "bc_term",
    "q_term",
    "beta_effective",
    "q_min_mean",
];
pub const SAC_EXTRA_COLUMNS: [&str; 3] = ["alpha", "policy_entropy_estimate", "bc_form"];

impl MetricsLog {
    pub fn new(kind: AgentKind, bc_form: Option<&'static str>) -> Self {
        Self {
            kind,
            bc_form,
            rows: Vec::new(),
            guarded_updates: 0,
        }
    }

    pub fn columns(&self) -> Vec<&'static str> {
        let mut cols = TD3_COLUMNS.to_vec();
        if self.kind == AgentKind::SacBcn {
            cols.extend(SAC_EXTRA_COLUMNS);
        }
        cols
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{}", self.columns().join(","))?;
        for r in &self.rows {
            write!(
                out,
                "{},{},{},{},{},{},{}",
                r.step, r.critic_loss_mean, r.policy_loss, r.bc_term, r.q_term, r.beta_effective, r.q_min_mean
            )?;
            if self.kind == AgentKind::SacBcn {
                write!(
                    out,
                    ",{},{},{}",
                    r.alpha.unwrap_or(f64::NAN),
                    r.policy_entropy_estimate.unwrap_or(f64::NAN),
                    self.bc_form.unwrap_or("")
                )?;
            }
            writeln!(out)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Running means over one logging interval.
#[derive(Debug, Default)]
struct Accumulator {
    steps: u64,
    critic: f64,
    policy_updates: u64,
    policy_loss: f64,
    bc: f64,
    q: f64,
    q_min: f64,
    entropy_n: u64,
    entropy: f64,
    alpha: Option<f64>,
    beta: f64,
}

impl Accumulator {
    fn push(&mut self, stats: &StepStats, beta: f64) {
        self.steps += 1;
        self.critic += stats.critic_loss_mean();
        if let Some(p) = stats.policy {
            self.policy_updates += 1;
            self.policy_loss += p.loss;
            self.bc += p.bc_term;
            self.q += p.q_term;
            self.q_min += p.q_min_mean;
        }
        if let Some(h) = stats.entropy {
            self.entropy_n += 1;
            self.entropy += h;
        }
        if stats.alpha.is_some() {
            self.alpha = stats.alpha;
        }
        self.beta = beta;
    }

    fn row(&self, step: u64, kind: AgentKind) -> MetricsRow {
        let p = |v: f64| {
            if self.policy_updates == 0 {
                f64::NAN
            } else {
                v / self.policy_updates as f64
            }
        };
        let sac = kind == AgentKind::SacBcn;
        MetricsRow {
            step,
            critic_loss_mean: self.critic / self.steps as f64,
            policy_loss: p(self.policy_loss),
            bc_term: p(self.bc),
            q_term: p(self.q),
            beta_effective: self.beta,
            q_min_mean: p(self.q_min),
            alpha: if sac { self.alpha } else { None },
            policy_entropy_estimate: if sac && self.entropy_n > 0 {
                Some(self.entropy / self.entropy_n as f64)
            } else {
                None
            },
        }
    }
}

/// Logging and evaluation cadence for the offline loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub log_every: u64,
    /// Calls the hook every this many steps; 0 disables it.
    pub eval_every: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            log_every: 1000,
            eval_every: 0,
        }
    }
}

pub type EvalHook<'a, A> = &'a mut dyn FnMut(&A, u64) -> Result<()>;

/// Checks a step's critic loss against the agent's ceiling.
pub fn check_divergence(step: u64, critic_loss: f64, ceiling: f64) -> Result<()> {
    if !critic_loss.is_finite() || critic_loss > ceiling {
        return Err(Error::Diverged(DivergenceReport {
            step,
            critic_loss,
            ceiling,
            reason: if critic_loss.is_finite() {
                "critic loss above ceiling".into()
            } else {
                "non-finite critic loss".into()
            },
        }));
    }
    Ok(())
}

/// Runs one training step, mapping numerical failures to a divergence report.
pub fn guarded_step<A: Agent + ?Sized>(
    agent: &mut A,
    batch: &Batch,
    beta: f64,
    rng: &mut dyn RngCore,
) -> Result<StepStats> {
    // 1-based, matching the step column of the metrics
    let step = agent.gradient_steps() + 1;
    let ceiling = agent.divergence_ceiling();
    let stats = match agent.train_step(batch, beta, rng) {
        Ok(s) => s,
        Err(Error::Numerical { what, member, batch_index }) => {
            return Err(Error::Diverged(DivergenceReport {
                step,
                critic_loss: f64::NAN,
                ceiling,
                reason: format!("{what} (member {member:?}, batch index {batch_index:?})"),
            }))
        }
        Err(e) => return Err(e),
    };
    check_divergence(step, stats.critic_loss_mean(), ceiling)?;
    Ok(stats)
}

/// Offline training on a fixed dataset with the inflated-β warm start.
pub fn train_offline<A: Agent + ?Sized>(
    agent: &mut A,
    dataset: &Dataset,
    steps: u64,
    options: TrainOptions,
    rng: &mut dyn RngCore,
    hook: Option<EvalHook<'_, A>>,
) -> Result<MetricsLog> {
    let mut log = MetricsLog::new(agent.kind(), agent.bc_form_label());
    train_offline_into(agent, dataset, steps, options, rng, hook, &mut log)?;
    Ok(log)
}

/// As [`train_offline`], appending rows to `log` so they survive a divergence.
pub fn train_offline_into<A: Agent + ?Sized>(
    agent: &mut A,
    dataset: &Dataset,
    steps: u64,
    options: TrainOptions,
    rng: &mut dyn RngCore,
    mut hook: Option<EvalHook<'_, A>>,
    log: &mut MetricsLog,
) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::State("offline training needs a non-empty dataset".into()));
    }
    if options.log_every == 0 {
        return Err(Error::config("log_every must be positive"));
    }
    let mut acc = Accumulator::default();
    for t in 1..=steps {
        let beta = agent.offline_beta();
        let batch = sample_batch(dataset, agent.batch_size(), dataset.reward_transform, rng)?;
        let stats = guarded_step(agent, &batch, beta, rng)?;
        if stats.policy.is_some_and(|p| p.scale_guarded) {
            log.guarded_updates += 1;
        }
        acc.push(&stats, beta);
        if t % options.log_every == 0 || t == steps {
            log.rows.push(acc.row(agent.gradient_steps(), agent.kind()));
            acc = Accumulator::default();
        }
        if options.eval_every > 0 && t % options.eval_every == 0 {
            if let Some(h) = hook.as_mut() {
                h(agent, t)?;
            }
        }
    }
    Ok(())
}
