//! Policy evaluation and normalized scores.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::Agent;
use crate::env::{expert_action, random_action, rollout, EnvSpec};
use crate::error::{Error, Result};

pub const MIN_REFERENCE_ROLLOUTS: usize = 100;
pub const DEFAULT_REFERENCE_ROLLOUTS: usize = 1000;

/// Mean and standard error (sample std over `sqrt(n)`); the error is 0 for one value.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub mean: f64,
    pub stderr: f64,
    pub returns: Vec<f64>,
    /// Set when only one episode was run, so `stderr` carries no information.
    pub single_episode: bool,
}

impl Evaluation {
    pub fn from_returns(returns: Vec<f64>) -> Self {
        let (mean, stderr) = mean_stderr(&returns);
        Self {
            mean,
            stderr,
            single_episode: returns.len() == 1,
            returns,
        }
    }
}

/// Raw returns of the deterministic policy over `episodes` episodes whose
/// start states are drawn from `seed`.
pub fn evaluate_policy<A: Agent + ?Sized>(agent: &A, env: &EnvSpec, episodes: usize, seed: u64) -> Result<Evaluation> {
    if episodes == 0 {
        return Err(Error::config("episodes must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failure = None;
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        returns.push(rollout(env, &mut rng, |s, r| match agent.act(s, false, r) {
            Ok(a) => a,
            Err(e) => {
                failure.get_or_insert(e);
                vec![0.0; env.action_dim]
            }
        }));
    }
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(Evaluation::from_returns(returns))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreReference {
    pub env: String,
    pub random_return: f64,
    pub expert_return: f64,
    pub rollouts: usize,
    pub seed: u64,
}

impl ScoreReference {
    pub fn validate(&self) -> Result<()> {
        if !(self.expert_return > self.random_return) {
            return Err(Error::config(format!(
                "degenerate score reference: expert {} vs random {}",
                self.expert_return, self.random_return
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::format(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let r: Self = toml::from_str(&text).map_err(|e| Error::format(e.to_string()))?;
        r.validate()?;
        Ok(r)
    }

    /// Reads `path` if it holds a reference with matching provenance, otherwise computes and writes it.
    pub fn cached(path: &Path, env: &EnvSpec, rollouts: usize, seed: u64) -> Result<Self> {
        if let Ok(r) = Self::load(path) {
            if r.env == env.name && r.rollouts == rollouts && r.seed == seed {
                return Ok(r);
            }
        }
        let r = compute_score_reference(env, rollouts, seed)?;
        r.save(path)?;
        Ok(r)
    }
}

/// Mean returns of the uniform-random policy and the scripted expert.
pub fn compute_score_reference(env: &EnvSpec, rollouts: usize, seed: u64) -> Result<ScoreReference> {
    if rollouts < MIN_REFERENCE_ROLLOUTS {
        return Err(Error::config(format!(
            "score references need at least {MIN_REFERENCE_ROLLOUTS} rollouts, got {rollouts}"
        )));
    }
    env.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let random: f64 = (0..rollouts)
        .map(|_| rollout(env, &mut rng, |_, r| random_action(env, r)))
        .sum::<f64>()
        / rollouts as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let expert: f64 = (0..rollouts)
        .map(|_| rollout(env, &mut rng, |s, _| expert_action(env, s)))
        .sum::<f64>()
        / rollouts as f64;
    let r = ScoreReference {
        env: env.name.clone(),
        random_return: random,
        expert_return: expert,
        rollouts,
        seed,
    };
    r.validate()?;
    Ok(r)
}

/// `100 (raw - random) / (expert - random)`.
pub fn normalized_score(raw: f64, reference: &ScoreReference) -> Result<f64> {
    reference.validate()?;
    Ok(100.0 * (raw - reference.random_return) / (reference.expert_return - reference.random_return))
}

/// Percentage gap between the mean and the worst score, `100 (mean - worst) / |mean|`.
pub fn worst_gap_percent(scores: &[f64]) -> f64 {
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let worst = scores.iter().copied().fold(f64::INFINITY, f64::min);
    if mean == worst {
        0.0
    } else {
        100.0 * (mean - worst) / mean.abs()
    }
}
