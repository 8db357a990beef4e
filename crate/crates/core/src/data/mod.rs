//! Behavior datasets, normalization statistics, reward transforms, the
//! replay buffer and minibatch sampling.

mod buffer;
mod io;

pub use buffer::{seed_buffer, ReplayBuffer, DEFAULT_CAPACITY};
pub use io::{load_dataset, read_dataset, save_dataset, write_csv, write_dataset, DATASET_MAGIC};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::{mixed_action, scripted_controller, EnvSpec, Tier, MEDIUM_NOISE, MEDIUM_RANDOM_PROB};
use crate::error::{Error, Result};

/// Added to the standard deviation when normalizing states.
pub const NORM_EPS: f64 = 1e-3;
/// Lower bound on stored per-coordinate standard deviations.
pub const STD_FLOOR: f64 = 1e-6;
pub const DEFAULT_BATCH_SIZE: usize = 256;
pub const DEFAULT_SEED_TRANSITIONS: usize = 2500;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    /// True termination: the next state is not bootstrapped.
    pub terminal: bool,
}

/// `r -> scale * (r - offset)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardTransform {
    pub scale: f64,
    pub offset: f64,
}

impl RewardTransform {
    pub const IDENTITY: RewardTransform = RewardTransform { scale: 1.0, offset: 0.0 };

    pub fn new(scale: f64, offset: f64) -> Self {
        Self { scale, offset }
    }

    pub fn apply(&self, reward: f64) -> f64 {
        transform_reward(reward, self.scale, self.offset)
    }
}

impl Default for RewardTransform {
    fn default() -> Self {
        Self::IDENTITY
    }
}

pub fn transform_reward(reward: f64, scale: f64, offset: f64) -> f64 {
    scale * (reward - offset)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub env: EnvSpec,
    pub tier: Tier,
    pub seed: u64,
    pub size: usize,
}

/// Per-coordinate state statistics used at the agent input boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct StateNormalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl StateNormalizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0 - NORM_EPS; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, state: &[f64]) -> Vec<f64> {
        state
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(s, (m, sd))| (s - m) / (sd + NORM_EPS))
            .collect()
    }

    /// Normalizes every row of `states` in place.
    pub fn normalize_rows(&self, states: &mut Array2<f64>) {
        for mut row in states.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / (self.std[j] + NORM_EPS);
            }
        }
    }

    /// Population mean and floored standard deviation of `states`.
    pub fn fit<'a, I: IntoIterator<Item = &'a [f64]>>(states: I, dim: usize) -> Self {
        let mut n = 0usize;
        let mut sum = vec![0.0; dim];
        let rows: Vec<&[f64]> = states.into_iter().collect();
        for s in &rows {
            n += 1;
            for (acc, v) in sum.iter_mut().zip(s.iter()) {
                *acc += v;
            }
        }
        if n == 0 {
            return Self {
                mean: vec![0.0; dim],
                std: vec![1.0; dim],
            };
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let mut sq = vec![0.0; dim];
        for s in &rows {
            for ((acc, v), m) in sq.iter_mut().zip(s.iter()).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let std = sq.iter().map(|q| (q / n as f64).sqrt().max(STD_FLOOR)).collect();
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub transitions: Vec<Transition>,
    pub provenance: Provenance,
    pub normalizer: StateNormalizer,
    pub reward_transform: RewardTransform,
}

impl Dataset {
    pub fn from_transitions(transitions: Vec<Transition>, env: EnvSpec, tier: Tier, seed: u64) -> Result<Self> {
        for (i, t) in transitions.iter().enumerate() {
            if t.state.len() != env.state_dim
                || t.next_state.len() != env.state_dim
                || t.action.len() != env.action_dim
            {
                return Err(Error::config(format!(
                    "transition {i} does not match the dimensions of {}",
                    env.name
                )));
            }
        }
        let normalizer = StateNormalizer::fit(transitions.iter().map(|t| t.state.as_slice()), env.state_dim);
        let size = transitions.len();
        Ok(Self {
            transitions,
            provenance: Provenance { env, tier, seed, size },
            normalizer,
            reward_transform: RewardTransform::IDENTITY,
        })
    }

    /// A dataset with no transitions, useful as the neutral element of [`concat`].
    pub fn empty(env: EnvSpec) -> Self {
        Self::from_transitions(Vec::new(), env, Tier::Mixed, 0).expect("empty dataset is always valid")
    }

    pub fn with_reward_transform(mut self, transform: RewardTransform) -> Self {
        self.reward_transform = transform;
        self
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn env(&self) -> &EnvSpec {
        &self.provenance.env
    }

    pub fn normalize_state(&self, state: &[f64]) -> Vec<f64> {
        self.normalizer.normalize(state)
    }

    /// Undiscounted returns of the complete episodes in the dataset.
    ///
    /// Episodes end at a terminal flag or where the next transition does not
    /// continue from the previous next state.
    pub fn episode_returns(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut ret = 0.0;
        let mut steps = 0usize;
        let horizon = self.env().max_episode_steps;
        for (i, t) in self.transitions.iter().enumerate() {
            ret += t.reward;
            steps += 1;
            let continues = self
                .transitions
                .get(i + 1)
                .is_some_and(|n| n.state == t.next_state && !t.terminal && steps < horizon);
            if !continues {
                if t.terminal || steps == horizon {
                    out.push(ret);
                }
                ret = 0.0;
                steps = 0;
            }
        }
        out
    }
}

/// Source of transitions for uniform sampling.
pub trait TransitionSource {
    fn len(&self) -> usize;

    fn get(&self, index: usize) -> &Transition;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl TransitionSource for Dataset {
    fn len(&self) -> usize {
        self.transitions.len()
    }

    fn get(&self, index: usize) -> &Transition {
        &self.transitions[index]
    }
}

impl TransitionSource for [Transition] {
    fn len(&self) -> usize {
        <[Transition]>::len(self)
    }

    fn get(&self, index: usize) -> &Transition {
        &self[index]
    }
}

/// Rolls the tier's scripted controller until `size` transitions are logged.
pub fn generate_dataset(env: &EnvSpec, tier: Tier, size: usize, seed: u64) -> Result<Dataset> {
    if size == 0 {
        return Err(Error::config("dataset size must be at least 1"));
    }
    env.validate()?;
    match tier {
        Tier::MediumExpert => {
            let half = size.div_ceil(2);
            let medium = generate_dataset(env, Tier::Medium, half, seed)?;
            if size == half {
                return Ok(medium);
            }
            let expert = generate_dataset(env, Tier::Expert, size - half, seed.wrapping_add(1))?;
            let mut combined = concat(&medium, &expert)?;
            combined.provenance.seed = seed;
            Ok(combined)
        }
        Tier::Mixed => Err(Error::config("the mixed tier is produced by concat, not generated")),
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut transitions = Vec::with_capacity(size);
            'episodes: loop {
                let mut state = env.reset(&mut rng);
                loop {
                    let obs = state.observation().to_vec();
                    let action = match tier {
                        Tier::MediumReplay => {
                            // anneal from uniform-random behavior to the medium controller
                            let frac = transitions.len() as f64 / size as f64;
                            let random_prob = 1.0 + (MEDIUM_RANDOM_PROB - 1.0) * frac;
                            let sigma = 1.0 + (MEDIUM_NOISE - 1.0) * frac;
                            mixed_action(env, &obs, sigma, random_prob, &mut rng)
                        }
                        _ => scripted_controller(env, tier, &obs, &mut rng)?,
                    };
                    let out = env.step(&state, &action);
                    transitions.push(Transition {
                        state: obs,
                        action,
                        reward: out.reward,
                        next_state: out.state.observation().to_vec(),
                        terminal: out.terminal,
                    });
                    if transitions.len() == size {
                        break 'episodes;
                    }
                    let done = out.done();
                    state = out.state;
                    if done {
                        break;
                    }
                }
            }
            Dataset::from_transitions(transitions, env.clone(), tier, seed)
        }
    }
}

/// Concatenates two datasets of the same environment and refits statistics.
pub fn concat(a: &Dataset, b: &Dataset) -> Result<Dataset> {
    if a.env() != b.env() {
        return Err(Error::config(format!(
            "cannot concatenate datasets of {} and {}",
            a.env().name,
            b.env().name
        )));
    }
    if a.is_empty() {
        return Ok(b.clone());
    }
    if b.is_empty() {
        return Ok(a.clone());
    }
    let tier = match (a.provenance.tier, b.provenance.tier) {
        (x, y) if x == y => x,
        (Tier::Medium, Tier::Expert) | (Tier::Expert, Tier::Medium) => Tier::MediumExpert,
        _ => Tier::Mixed,
    };
    let mut transitions = a.transitions.clone();
    transitions.extend(b.transitions.iter().cloned());
    let mut out = Dataset::from_transitions(transitions, a.env().clone(), tier, a.provenance.seed)?;
    out.reward_transform = a.reward_transform;
    Ok(out)
}

/// Minibatch in matrix form; states are raw (normalization happens in the agent).
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_states: Array2<f64>,
    /// `1 - terminal` per row.
    pub not_done: Array1<f64>,
}

impl Batch {
    pub fn from_transitions(transitions: &[&Transition], transform: RewardTransform) -> Self {
        let n = transitions.len();
        let s_dim = transitions.first().map_or(0, |t| t.state.len());
        let a_dim = transitions.first().map_or(0, |t| t.action.len());
        let mut states = Array2::zeros((n, s_dim));
        let mut next_states = Array2::zeros((n, s_dim));
        let mut actions = Array2::zeros((n, a_dim));
        let mut rewards = Array1::zeros(n);
        let mut not_done = Array1::zeros(n);
        for (i, t) in transitions.iter().enumerate() {
            for j in 0..s_dim {
                states[[i, j]] = t.state[j];
                next_states[[i, j]] = t.next_state[j];
            }
            for j in 0..a_dim {
                actions[[i, j]] = t.action[j];
            }
            rewards[i] = transform.apply(t.reward);
            not_done[i] = if t.terminal { 0.0 } else { 1.0 };
        }
        Self {
            states,
            actions,
            rewards,
            next_states,
            not_done,
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Uniform with-replacement draw of `batch` transitions.
pub fn sample_minibatch<'a, S, R>(source: &'a S, batch: usize, rng: &mut R) -> Result<Vec<&'a Transition>>
where
    S: TransitionSource + ?Sized,
    R: Rng + ?Sized,
{
    if source.is_empty() {
        return Err(Error::State("cannot sample from an empty source".into()));
    }
    if batch == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    Ok(sample_indices(source.len(), batch, rng)
        .into_iter()
        .map(|i| source.get(i))
        .collect())
}

/// Uniform with-replacement indices into a source of length `len > 0`.
pub fn sample_indices<R: Rng + ?Sized>(len: usize, batch: usize, rng: &mut R) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..len)).collect()
}

pub fn sample_batch<S, R>(source: &S, batch: usize, transform: RewardTransform, rng: &mut R) -> Result<Batch>
where
    S: TransitionSource + ?Sized,
    R: Rng + ?Sized,
{
    let picks = sample_minibatch(source, batch, rng)?;
    Ok(Batch::from_transitions(&picks, transform))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::rollout;

    fn dense() -> EnvSpec {
        EnvSpec::point_dense()
    }

    #[test]
    fn single_transition_dataset_has_floored_std() {
        let d = generate_dataset(&dense(), Tier::Expert, 1, 3).unwrap();
        assert_eq!(d.len(), 1);
        assert!(d.normalizer.std.iter().all(|&s| s == STD_FLOOR));
        assert_eq!(d.normalize_state(&d.transitions[0].state), vec![0.0, 0.0]);
    }

    #[test]
    fn generation_is_deterministic() {
        for tier in [Tier::Random, Tier::Medium, Tier::Expert, Tier::MediumReplay, Tier::MediumExpert] {
            let a = generate_dataset(&dense(), tier, 700, 42).unwrap();
            let b = generate_dataset(&dense(), tier, 700, 42).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.len(), 700);
            assert_eq!(a.provenance.tier, tier);
        }
        let c = generate_dataset(&dense(), Tier::Medium, 700, 43).unwrap();
        assert_ne!(c, generate_dataset(&dense(), Tier::Medium, 700, 42).unwrap());
    }

    #[test]
    fn zero_size_rejected() {
        assert!(generate_dataset(&dense(), Tier::Expert, 0, 0).is_err());
    }

    #[test]
    fn expert_dataset_returns_match_rollouts() {
        let env = dense();
        let d = generate_dataset(&env, Tier::Expert, 50_000, 5).unwrap();
        let data_returns = d.episode_returns();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let oracle: Vec<f64> = (0..1000)
            .map(|_| {
                rollout(&env, &mut rng, |s, r| {
                    scripted_controller(&env, Tier::Expert, s, r).unwrap()
                })
            })
            .collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let se = |v: &[f64]| {
            let m = mean(v);
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64 / v.len() as f64).sqrt()
        };
        let gap = (mean(&data_returns) - mean(&oracle)).abs();
        let tol = 3.0 * (se(&data_returns).powi(2) + se(&oracle).powi(2)).sqrt();
        assert!(gap < tol, "gap {gap} tol {tol}");
    }

    #[test]
    fn concat_identity_and_sizes() {
        let env = dense();
        let a = generate_dataset(&env, Tier::Medium, 10_000, 1).unwrap();
        let e = concat(&a, &Dataset::empty(env.clone())).unwrap();
        assert_eq!(e, a);
        let b = generate_dataset(&env, Tier::Expert, 10_000, 2).unwrap();
        let ab = concat(&a, &b).unwrap();
        assert_eq!(ab.len(), 20_000);
        assert_eq!(ab.provenance.tier, Tier::MediumExpert);
        for j in 0..2 {
            let weighted = (a.normalizer.mean[j] * a.len() as f64 + b.normalizer.mean[j] * b.len() as f64)
                / (a.len() + b.len()) as f64;
            assert!((ab.normalizer.mean[j] - weighted).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_rejects_env_mismatch() {
        let a = generate_dataset(&dense(), Tier::Medium, 10, 1).unwrap();
        let b = generate_dataset(&EnvSpec::point_sparse(), Tier::Medium, 10, 1).unwrap();
        assert!(matches!(concat(&a, &b), Err(Error::Config(_))));
    }

    #[test]
    fn normalization_centers_and_scales() {
        let d = generate_dataset(&dense(), Tier::Medium, 5_000, 8).unwrap();
        assert_eq!(d.normalize_state(&d.normalizer.mean.clone()), vec![0.0, 0.0]);
        let rows: Vec<Vec<f64>> = d.transitions.iter().map(|t| d.normalize_state(&t.state)).collect();
        for j in 0..2 {
            let m = rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64;
            let v = rows.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / rows.len() as f64;
            assert!(m.abs() < 1e-9);
            assert!((v.sqrt() - 1.0).abs() < 1e-2);
        }
    }

    #[test]
    fn constant_coordinate_normalizes_to_zero() {
        let env = dense();
        let t = |x: f64| Transition {
            state: vec![x, 0.5],
            action: vec![0.0, 0.0],
            reward: 0.0,
            next_state: vec![x, 0.5],
            terminal: false,
        };
        let d = Dataset::from_transitions(vec![t(0.1), t(0.4), t(-0.3)], env, Tier::Mixed, 0).unwrap();
        assert_eq!(d.normalize_state(&[0.2, 0.5])[1], 0.0);
    }

    #[test]
    fn reward_transform_values() {
        assert_eq!(transform_reward(1.0, 4.0, 0.5), 2.0);
        assert_eq!(transform_reward(0.0, 4.0, 0.5), -2.0);
        assert_eq!(transform_reward(-3.25, 1.0, 0.0), -3.25);
    }

    #[test]
    fn forced_single_draw() {
        let d = generate_dataset(&dense(), Tier::Random, 1, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = sample_minibatch(&d, 1, &mut rng).unwrap();
        assert_eq!(b[0], &d.transitions[0]);
    }

    #[test]
    fn empty_source_is_state_error() {
        let d = Dataset::empty(dense());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(sample_minibatch(&d, 4, &mut rng), Err(Error::State(_))));
    }

    #[test]
    fn sampling_is_uniform() {
        let n = 50;
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let mut counts = vec![0usize; n];
        let draws = 1_000_000;
        for i in sample_indices(n, draws, &mut rng) {
            counts[i] += 1;
        }
        let p = 1.0 / n as f64;
        let expect = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - expect).abs() < 3.0 * sd, "count {c} expect {expect}");
        }
    }

    #[test]
    fn fixed_seed_batches_repeat() {
        let d = generate_dataset(&dense(), Tier::Medium, 300, 1).unwrap();
        let a = sample_batch(&d, 16, d.reward_transform, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_batch(&d, 16, d.reward_transform, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }
}
