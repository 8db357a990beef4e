//! Deterministic point-mass navigation tasks and the scripted controllers
//! that generate behavior data.
//!
//! The agent moves inside the box `[-arena, arena]^2` by
//! `position <- clamp(position + step_scale * action)`. In dense mode the
//! reward is the negative distance to the goal; in sparse mode it is 1 inside
//! the goal radius (which also ends the episode) and 0 elsewhere.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardMode {
    Dense,
    Sparse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub name: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub max_episode_steps: usize,
    pub reward_mode: RewardMode,
    pub step_scale: f64,
    pub arena: f64,
    pub goal: Vec<f64>,
    pub goal_radius: f64,
}

pub const POINT_DENSE: &str = "point-dense";
pub const POINT_SPARSE: &str = "point-sparse";

impl EnvSpec {
    fn point(name: &str, reward_mode: RewardMode) -> Self {
        Self {
            name: name.to_owned(),
            state_dim: 2,
            action_dim: 2,
            max_episode_steps: 100,
            reward_mode,
            step_scale: 0.05,
            arena: 1.0,
            goal: vec![0.7, 0.7],
            goal_radius: 0.1,
        }
    }

    pub fn point_dense() -> Self {
        Self::point(POINT_DENSE, RewardMode::Dense)
    }

    pub fn point_sparse() -> Self {
        Self::point(POINT_SPARSE, RewardMode::Sparse)
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            POINT_DENSE => Ok(Self::point_dense()),
            POINT_SPARSE => Ok(Self::point_sparse()),
            other => Err(Error::config(format!(
                "unknown environment {other:?} (expected {POINT_DENSE} or {POINT_SPARSE})"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 || self.action_dim == 0 || self.max_episode_steps == 0 {
            return Err(Error::config("environment dimensions and horizon must be positive"));
        }
        if self.state_dim != self.goal.len() || self.state_dim != self.action_dim {
            return Err(Error::config(
                "point environments need state_dim == action_dim == goal dimension",
            ));
        }
        if !(self.step_scale > 0.0 && self.arena > 0.0 && self.goal_radius > 0.0) {
            return Err(Error::config("step_scale, arena and goal_radius must be positive"));
        }
        Ok(())
    }

    /// Largest distance between two points of the arena.
    pub fn diameter(&self) -> f64 {
        2.0 * self.arena * (self.state_dim as f64).sqrt()
    }

    pub fn distance_to_goal(&self, position: &[f64]) -> f64 {
        position
            .iter()
            .zip(&self.goal)
            .map(|(p, g)| (p - g) * (p - g))
            .sum::<f64>()
            .sqrt()
    }

    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> EnvState {
        let dist = Uniform::new_inclusive(-self.arena, self.arena).unwrap();
        EnvState {
            position: (0..self.state_dim).map(|_| dist.sample(rng)).collect(),
            steps: 0,
        }
    }

    /// Advances one step. Actions outside `[-1, 1]` are clamped.
    pub fn step(&self, state: &EnvState, action: &[f64]) -> StepOutcome {
        let position: Vec<f64> = state
            .position
            .iter()
            .zip(action)
            .map(|(p, a)| (p + self.step_scale * a.clamp(-1.0, 1.0)).clamp(-self.arena, self.arena))
            .collect();
        let dist = self.distance_to_goal(&position);
        let steps = state.steps + 1;
        let (reward, terminal) = match self.reward_mode {
            RewardMode::Dense => (-dist, false),
            RewardMode::Sparse => {
                if dist <= self.goal_radius {
                    (1.0, true)
                } else {
                    (0.0, false)
                }
            }
        };
        StepOutcome {
            state: EnvState { position, steps },
            reward,
            terminal,
            truncated: !terminal && steps >= self.max_episode_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub position: Vec<f64>,
    pub steps: usize,
}

impl EnvState {
    pub fn observation(&self) -> &[f64] {
        &self.position
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: EnvState,
    pub reward: f64,
    /// True termination (goal reached in sparse mode); never bootstrapped.
    pub terminal: bool,
    /// Time-limit cut-off; the next state is still bootstrapped.
    pub truncated: bool,
}

impl StepOutcome {
    pub fn done(&self) -> bool {
        self.terminal || self.truncated
    }
}

/// Behavior-data quality levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tier {
    Random,
    Medium,
    Expert,
    MediumReplay,
    MediumExpert,
    Mixed,
}

impl Tier {
    pub fn as_str(self) -> &'static str {
        match self {
            Tier::Random => "random",
            Tier::Medium => "medium",
            Tier::Expert => "expert",
            Tier::MediumReplay => "medium-replay",
            Tier::MediumExpert => "medium-expert",
            Tier::Mixed => "mixed",
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Tier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "random" => Tier::Random,
            "medium" => Tier::Medium,
            "expert" => Tier::Expert,
            "medium-replay" => Tier::MediumReplay,
            "medium-expert" => Tier::MediumExpert,
            "mixed" => Tier::Mixed,
            other => return Err(Error::config(format!("unknown data tier {other:?}"))),
        })
    }
}

pub const EXPERT_NOISE: f64 = 0.05;
pub const MEDIUM_NOISE: f64 = 0.4;
pub const MEDIUM_RANDOM_PROB: f64 = 0.3;

/// Noise-free expert: full-speed unit vector toward the goal, shortened on
/// the final approach so the goal is hit exactly instead of overshot.
pub fn expert_action(env: &EnvSpec, state: &[f64]) -> Vec<f64> {
    let dist = env.distance_to_goal(state);
    if dist == 0.0 {
        return vec![0.0; env.action_dim];
    }
    let speed = (dist / env.step_scale).min(1.0);
    state
        .iter()
        .zip(&env.goal)
        .map(|(p, g)| (g - p) / dist * speed)
        .collect()
}

pub fn random_action<R: Rng + ?Sized>(env: &EnvSpec, rng: &mut R) -> Vec<f64> {
    let dist = Uniform::new_inclusive(-1.0, 1.0).unwrap();
    (0..env.action_dim).map(|_| dist.sample(rng)).collect()
}

/// Expert action plus per-coordinate Gaussian noise, clamped to bounds.
pub fn noisy_expert_action<R: Rng + ?Sized>(env: &EnvSpec, state: &[f64], sigma: f64, rng: &mut R) -> Vec<f64> {
    let base = expert_action(env, state);
    if sigma == 0.0 {
        return base;
    }
    let noise = Normal::new(0.0, sigma).unwrap();
    base.into_iter()
        .map(|a| (a + noise.sample(rng)).clamp(-1.0, 1.0))
        .collect()
}

/// Controller that blends the expert with noise and uniform-random actions.
pub fn mixed_action<R: Rng + ?Sized>(
    env: &EnvSpec,
    state: &[f64],
    sigma: f64,
    random_prob: f64,
    rng: &mut R,
) -> Vec<f64> {
    if random_prob > 0.0 && rng.random::<f64>() < random_prob {
        random_action(env, rng)
    } else {
        noisy_expert_action(env, state, sigma, rng)
    }
}

/// Scripted behavior policy for one of the base tiers.
pub fn scripted_controller<R: Rng + ?Sized>(env: &EnvSpec, tier: Tier, state: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    match tier {
        Tier::Random => Ok(random_action(env, rng)),
        Tier::Medium => Ok(mixed_action(env, state, MEDIUM_NOISE, MEDIUM_RANDOM_PROB, rng)),
        Tier::Expert => Ok(noisy_expert_action(env, state, EXPERT_NOISE, rng)),
        other => Err(Error::config(format!(
            "tier {other} has no single scripted controller"
        ))),
    }
}

/// Plays one episode with `policy`, returning the undiscounted return.
pub fn rollout<R, P>(env: &EnvSpec, rng: &mut R, mut policy: P) -> f64
where
    R: Rng + ?Sized,
    P: FnMut(&[f64], &mut R) -> Vec<f64>,
{
    let mut state = env.reset(rng);
    let mut ret = 0.0;
    loop {
        let action = policy(state.observation(), rng);
        let out = env.step(&state, &action);
        ret += out.reward;
        let done = out.done();
        state = out.state;
        if done {
            return ret;
        }
    }
}
