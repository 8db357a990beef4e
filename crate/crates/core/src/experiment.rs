//! Seeded multi-run experiments: configuration, agent construction with
//! ablation switches, training, evaluation and result bundles.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{train_offline_into, AgentKind, AnyAgent, MetricsLog, TrainOptions};
use crate::checkpoint::save_checkpoint;
use crate::critic::TargetMode;
use crate::data::{generate_dataset, load_dataset, Dataset, StateNormalizer};
use crate::env::{EnvSpec, RewardMode, Tier};
use crate::error::{DivergenceReport, Error, Result};
use crate::eval::{evaluate_policy, mean_stderr, normalized_score, worst_gap_percent, ScoreReference};
use crate::finetune::FinetuneConfig;
use crate::sac::{SacBcnAgent, SacConfig};
use crate::td3::{Td3BcnAgent, Td3Config};

pub const OUTPUT_ROOT_ENV: &str = "ENSBC_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub agent: AgentKind,
    pub env: String,
    /// Saved dataset; when absent one is generated from `tier`, `dataset_size`, `dataset_seed`.
    pub dataset: Option<PathBuf>,
    pub tier: Tier,
    pub dataset_size: usize,
    pub dataset_seed: u64,
    pub seeds: Vec<u64>,
    pub gradient_steps: u64,
    /// Defaults to 10 for dense and 100 for sparse rewards.
    pub eval_episodes: Option<usize>,
    pub eval_seed: u64,
    pub log_every: u64,
    pub reference_rollouts: usize,
    pub reference_seed: u64,
    pub out_dir: PathBuf,
    /// Allows `tier_beta` to override β per data tier.
    pub per_tier_beta: bool,
    pub tier_beta: BTreeMap<String, f64>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            agent: AgentKind::Td3Bcn,
            env: crate::env::POINT_DENSE.into(),
            dataset: None,
            tier: Tier::Medium,
            dataset_size: 100_000,
            dataset_seed: 0,
            seeds: vec![0, 1, 2, 3, 4],
            gradient_steps: 1_000_000,
            eval_episodes: None,
            eval_seed: 1_000_000,
            log_every: 5000,
            reference_rollouts: crate::eval::DEFAULT_REFERENCE_ROLLOUTS,
            reference_seed: 0,
            out_dir: PathBuf::from("runs"),
            per_tier_beta: false,
            tier_beta: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    /// Forces β = 0.
    pub disable_bc: bool,
    pub ensemble_n_override: Option<usize>,
    /// Sets the inflation factor to 1.
    pub disable_inflation: bool,
    pub target_mode: Option<TargetMode>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub td3: Td3Config,
    pub sac: SacConfig,
    pub ablation: AblationSection,
    pub finetune: FinetuneConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::format(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        if e.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if e.log_every == 0 {
            return Err(Error::config("log_every must be positive"));
        }
        if e.eval_episodes == Some(0) {
            return Err(Error::config("eval_episodes must be positive"));
        }
        if !e.per_tier_beta && !e.tier_beta.is_empty() {
            return Err(Error::config("tier_beta requires per_tier_beta = true"));
        }
        for (k, b) in &e.tier_beta {
            k.parse::<Tier>()?;
            if !(*b >= 0.0 && b.is_finite()) {
                return Err(Error::config(format!("tier_beta for {k} must be non-negative")));
            }
        }
        if self.ablation.ensemble_n_override == Some(0) {
            return Err(Error::config("ensemble_n_override must be at least 1"));
        }
        EnvSpec::by_name(&e.env)?;
        self.td3.validate()?;
        self.sac.validate()
    }

    pub fn env(&self) -> Result<EnvSpec> {
        EnvSpec::by_name(&self.experiment.env)
    }

    pub fn eval_episodes(&self, env: &EnvSpec) -> usize {
        self.experiment.eval_episodes.unwrap_or(match env.reward_mode {
            RewardMode::Dense => 10,
            RewardMode::Sparse => 100,
        })
    }

    /// β for a data tier after the per-tier override and the BC ablation.
    pub fn beta_for(&self, tier: Tier) -> f64 {
        if self.ablation.disable_bc {
            return 0.0;
        }
        let base = match self.experiment.agent {
            AgentKind::Td3Bcn => self.td3.beta,
            AgentKind::SacBcn => self.sac.beta,
        };
        if self.experiment.per_tier_beta {
            if let Some(b) = self.experiment.tier_beta.get(tier.as_str()) {
                return *b;
            }
        }
        base
    }

    /// The agent configuration actually trained, with ablations applied.
    pub fn resolved(&self, tier: Tier) -> Self {
        let mut c = self.clone();
        let beta = self.beta_for(tier);
        let a = &self.ablation;
        c.td3.beta = beta;
        c.sac.beta = beta;
        if let Some(n) = a.ensemble_n_override {
            c.td3.ensemble_size = n;
            c.sac.ensemble_size = n;
        }
        if a.disable_inflation {
            c.td3.inflation_factor = 1.0;
            c.sac.inflation_factor = 1.0;
        }
        if let Some(m) = a.target_mode {
            c.td3.target_mode = m;
            c.sac.target_mode = m;
        }
        c
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let env = self.env()?;
        let d = match &self.experiment.dataset {
            Some(p) => load_dataset(p)?,
            None => generate_dataset(&env, self.experiment.tier, self.experiment.dataset_size, self.experiment.dataset_seed)?,
        };
        if d.env().state_dim != env.state_dim || d.env().action_dim != env.action_dim {
            return Err(Error::config("dataset does not match the configured environment"));
        }
        Ok(d)
    }
}

/// Builds a fresh agent from a resolved config.
pub fn build_agent(
    config: &ExperimentConfig,
    env: &EnvSpec,
    normalizer: StateNormalizer,
    seed: u64,
) -> Result<AnyAgent> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(match config.experiment.agent {
        AgentKind::Td3Bcn => AnyAgent::Td3(Td3BcnAgent::new(
            config.td3.clone(),
            env.state_dim,
            env.action_dim,
            normalizer,
            &mut rng,
        )?),
        AgentKind::SacBcn => AnyAgent::Sac(SacBcnAgent::new(
            config.sac.clone(),
            env.state_dim,
            env.action_dim,
            normalizer,
            &mut rng,
        )?),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    pub diverged: Option<DivergenceReport>,
    /// Normalized per-episode scores (empty when diverged).
    pub scores: Vec<f64>,
    pub score_mean: f64,
    pub score_stderr: f64,
    pub worst_gap_pct: f64,
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSummary {
    pub outcomes: Vec<SeedOutcome>,
    /// Mean and standard error over all pooled evaluation episodes of non-diverged seeds.
    pub pooled_mean: f64,
    pub pooled_stderr: f64,
    /// Standard error of the per-seed means.
    pub seed_stderr: f64,
    pub worst_gap_pct: f64,
    pub reference: ScoreReference,
}

impl ExperimentSummary {
    pub fn diverged_seeds(&self) -> usize {
        self.outcomes.iter().filter(|o| o.diverged.is_some()).count()
    }
}

pub const SUMMARY_COLUMNS: [&str; 8] = [
    "seed",
    "status",
    "episodes",
    "score_mean",
    "score_stderr",
    "seed_stderr",
    "worst_gap_pct",
    "diverged_at_step",
];

pub fn write_summary<W: Write>(summary: &ExperimentSummary, mut out: W) -> Result<()> {
    writeln!(out, "{}", SUMMARY_COLUMNS.join(","))?;
    for o in &summary.outcomes {
        let (status, at) = match &o.diverged {
            Some(r) => ("diverged", r.step.to_string()),
            None => ("ok", String::new()),
        };
        writeln!(
            out,
            "{},{},{},{},{},,{},{}",
            o.seed,
            status,
            o.scores.len(),
            o.score_mean,
            o.score_stderr,
            o.worst_gap_pct,
            at
        )?;
    }
    let n: usize = summary.outcomes.iter().map(|o| o.scores.len()).sum();
    writeln!(
        out,
        "pooled,{},{},{},{},{},{},",
        if summary.diverged_seeds() > 0 { "partial" } else { "ok" },
        n,
        summary.pooled_mean,
        summary.pooled_stderr,
        summary.seed_stderr,
        summary.worst_gap_pct
    )?;
    out.flush()?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Trains and evaluates one seed, writing `metrics.csv`, `checkpoint.bin` and `config.toml` into `dir`.
pub fn run_seed(
    config: &ExperimentConfig,
    env: &EnvSpec,
    dataset: &Dataset,
    reference: &ScoreReference,
    seed: u64,
    dir: &Path,
) -> Result<SeedOutcome> {
    fs::create_dir_all(dir)?;
    let resolved = config.resolved(dataset.provenance.tier);
    fs::write(dir.join("config.toml"), resolved.to_toml_string()?)?;
    let mut agent = build_agent(&resolved, env, dataset.normalizer.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5eed));
    let a = agent.as_dyn_mut();
    let mut log = MetricsLog::new(a.kind(), a.bc_form_label());
    let options = TrainOptions {
        log_every: config.experiment.log_every,
        eval_every: 0,
    };
    let trained = train_offline_into(a, dataset, config.experiment.gradient_steps, options, &mut rng, None, &mut log);
    log.write_csv(create(&dir.join("metrics.csv"))?)?;
    let diverged = match trained {
        Ok(()) => None,
        Err(Error::Diverged(r)) => Some(r),
        Err(e) => return Err(e),
    };
    let mut outcome = SeedOutcome {
        seed,
        diverged,
        scores: Vec::new(),
        score_mean: f64::NAN,
        score_stderr: f64::NAN,
        worst_gap_pct: f64::NAN,
        dir: dir.to_path_buf(),
    };
    if let Some(r) = &outcome.diverged {
        fs::write(dir.join("divergence.txt"), format!("{r}\n"))?;
        return Ok(outcome);
    }
    save_checkpoint(agent.as_dyn(), &dir.join("checkpoint.bin"))?;
    let ev = evaluate_policy(
        agent.as_dyn(),
        env,
        config.eval_episodes(env),
        config.experiment.eval_seed.wrapping_add(seed),
    )?;
    outcome.scores = ev
        .returns
        .iter()
        .map(|r| normalized_score(*r, reference))
        .collect::<Result<_>>()?;
    (outcome.score_mean, outcome.score_stderr) = mean_stderr(&outcome.scores);
    outcome.worst_gap_pct = worst_gap_percent(&outcome.scores);
    Ok(outcome)
}

/// Places a relative output path under `$ENSBC_OUTPUT_ROOT` when that is set.
pub fn resolve_output(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if path.is_relative() && !root.is_empty() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

pub fn output_dir(config: &ExperimentConfig) -> PathBuf {
    resolve_output(&config.experiment.out_dir)
}

/// Runs every seed of `config` into `out_dir` and writes `summary.csv` and the resolved config.
pub fn run_experiment_in(config: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentSummary> {
    config.validate()?;
    let env = config.env()?;
    let dataset = config.load_dataset()?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config.toml"), config.resolved(dataset.provenance.tier).to_toml_string()?)?;
    let reference = ScoreReference::cached(
        &out_dir.join("score_reference.toml"),
        &env,
        config.experiment.reference_rollouts,
        config.experiment.reference_seed,
    )?;
    let mut outcomes = Vec::with_capacity(config.experiment.seeds.len());
    for &seed in &config.experiment.seeds {
        let dir = out_dir.join(format!("seed_{seed}"));
        outcomes.push(run_seed(config, &env, &dataset, &reference, seed, &dir)?);
    }
    let pooled: Vec<f64> = outcomes.iter().flat_map(|o| o.scores.iter().copied()).collect();
    let seed_means: Vec<f64> = outcomes
        .iter()
        .filter(|o| o.diverged.is_none())
        .map(|o| o.score_mean)
        .collect();
    let (pooled_mean, pooled_stderr) = if pooled.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        mean_stderr(&pooled)
    };
    let seed_stderr = if seed_means.is_empty() {
        f64::NAN
    } else {
        mean_stderr(&seed_means).1
    };
    let summary = ExperimentSummary {
        worst_gap_pct: if pooled.is_empty() { f64::NAN } else { worst_gap_percent(&pooled) },
        outcomes,
        pooled_mean,
        pooled_stderr,
        seed_stderr,
        reference,
    };
    write_summary(&summary, create(&out_dir.join("summary.csv"))?)?;
    Ok(summary)
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentSummary> {
    run_experiment_in(config, &output_dir(config))
}
