use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use ensbc_core::checkpoint::{load_checkpoint, save_checkpoint};
use ensbc_core::data::{generate_dataset, load_dataset, save_dataset, write_csv};
use ensbc_core::diagnostics::{distance_profile, member_values, random_action_probe, ProfileProvenance};
use ensbc_core::env::{EnvSpec, Tier};
use ensbc_core::eval::{evaluate_policy, normalized_score, ScoreReference, DEFAULT_REFERENCE_ROLLOUTS};
use ensbc_core::experiment::{resolve_output, run_experiment_in, ExperimentConfig};
use ensbc_core::finetune::{run_finetune, FinetuneConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "ensbc", version, about = "Ensemble critics with behaviour cloning for offline RL")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out a scripted controller and save the transitions.
    GenData {
        #[arg(long, default_value = "point-dense")]
        env: String,
        #[arg(long)]
        tier: Tier,
        #[arg(long, default_value_t = 100_000)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write a CSV export next to the dataset.
        #[arg(long)]
        csv: bool,
    },
    /// Train every seed of an experiment config offline and evaluate it.
    TrainOffline {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `experiment.out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Fine-tune a checkpoint online with a decaying BC coefficient.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "point-dense")]
        env: String,
        #[arg(long)]
        dataset: PathBuf,
        /// Defaults to the checkpoint's β.
        #[arg(long)]
        beta_start: Option<f64>,
        #[arg(long, default_value_t = 0.0)]
        beta_end: f64,
        #[arg(long, default_value_t = 50_000)]
        decay_steps: u64,
        #[arg(long, default_value_t = 2500)]
        warmup: u64,
        #[arg(long, default_value_t = 250_000)]
        steps: u64,
        #[arg(long, default_value_t = 5000)]
        eval_every: u64,
        #[arg(long, default_value_t = 10)]
        eval_episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distance-binned ensemble uncertainty profile of a checkpoint.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 50_000)]
        budget: usize,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Write per-member Q-values of every probe as well.
        #[arg(long)]
        dump_members: Option<PathBuf>,
    },
    /// Evaluate a checkpoint's deterministic policy.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "point-dense")]
        env: String,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Compute random and expert reference returns for an environment.
    Refscore {
        #[arg(long, default_value = "point-dense")]
        env: String,
        #[arg(long, default_value_t = DEFAULT_REFERENCE_ROLLOUTS)]
        rollouts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn reference_for(env: &EnvSpec, path: Option<&Path>, fallback: &Path) -> Result<ScoreReference> {
    let r = match path {
        Some(p) => ScoreReference::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ScoreReference::cached(fallback, env, DEFAULT_REFERENCE_ROLLOUTS, 0)?,
    };
    if r.env != env.name {
        bail!("score reference is for {}, not {}", r.env, env.name);
    }
    Ok(r)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { env, tier, size, seed, out, csv } => {
            let env = EnvSpec::by_name(&env)?;
            let out = resolve_output(&out);
            let d = generate_dataset(&env, tier, size, seed)?;
            if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            save_dataset(&d, &out)?;
            if csv {
                write_csv(&d, create(&out.with_extension("csv"))?)?;
            }
            println!("wrote {} transitions to {}", d.len(), out.display());
        }
        Command::TrainOffline { config, out, dataset, seeds, steps } => {
            let mut c = match config {
                Some(p) => ExperimentConfig::load(&p).with_context(|| format!("loading {}", p.display()))?,
                None => ExperimentConfig::default(),
            };
            if let Some(d) = dataset {
                c.experiment.dataset = Some(d);
            }
            if let Some(s) = seeds {
                c.experiment.seeds = s;
            }
            if let Some(s) = steps {
                c.experiment.gradient_steps = s;
            }
            c.validate()?;
            let out = resolve_output(out.as_deref().unwrap_or(&c.experiment.out_dir));
            let summary = run_experiment_in(&c, &out)?;
            for o in &summary.outcomes {
                match &o.diverged {
                    Some(r) => println!("seed {}: {r}", o.seed),
                    None => println!("seed {}: {:.2} ± {:.2}", o.seed, o.score_mean, o.score_stderr),
                }
            }
            println!(
                "pooled: {:.2} ± {:.2} (seed stderr {:.2}, worst gap {:.1}%)",
                summary.pooled_mean, summary.pooled_stderr, summary.seed_stderr, summary.worst_gap_pct
            );
            println!("results in {}", out.display());
        }
        Command::Finetune {
            checkpoint,
            env,
            dataset,
            beta_start,
            beta_end,
            decay_steps,
            warmup,
            steps,
            eval_every,
            eval_episodes,
            seed,
            reference,
            out,
        } => {
            let env = EnvSpec::by_name(&env)?;
            let mut agent = load_checkpoint(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let dataset = load_dataset(&dataset)?;
            let out = resolve_output(&out);
            fs::create_dir_all(&out)?;
            let reference = reference_for(&env, reference.as_deref(), &out.join("score_reference.toml"))?;
            let config = FinetuneConfig {
                beta_start,
                beta_end,
                decay_steps,
                warmup,
                total_steps: steps,
                eval_every,
                eval_episodes,
                ..FinetuneConfig::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let log = run_finetune(agent.as_dyn_mut(), &env, &dataset, &config, &reference, &mut rng)?;
            log.write_csv(create(&out.join("finetune.csv"))?)?;
            save_checkpoint(agent.as_dyn(), &out.join("checkpoint.bin"))?;
            if let Some(last) = log.rows.last() {
                println!(
                    "step {}: {:.2} ± {:.2} (beta {})",
                    last.step, last.eval_score_mean, last.eval_score_stderr, last.beta
                );
            }
        }
        Command::Diagnose { checkpoint, dataset, budget, bins, seed, out, dump_members } => {
            let agent = load_checkpoint(&checkpoint)?;
            let agent = agent.as_dyn();
            let dataset = load_dataset(&dataset)?;
            let provenance = ProfileProvenance::of_agent(agent, budget, bins);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let profile = distance_profile(
                &dataset,
                agent.critics(),
                agent.normalizer(),
                budget,
                bins,
                provenance.clone(),
                &mut rng,
            )?;
            let out = resolve_output(&out);
            profile.write_csv(create(&out)?)?;
            fs::write(out.with_extension("provenance.toml"), provenance.to_toml_string()?)?;
            if let Some(path) = dump_members {
                // same seed, so the probes match the profile
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let probe = random_action_probe(&dataset, agent.normalizer(), budget, &mut rng)?;
                let q = member_values(agent.critics(), &probe)?;
                write_members(&resolve_output(&path), &probe.distances, &q)?;
            }
            println!(
                "wrote {bins} bins to {} (trend {:.3}, top-quartile q_std {:.4})",
                out.display(),
                profile.distance_trend(),
                profile.top_quartile_q_std()
            );
        }
        Command::Eval { checkpoint, env, episodes, seed, reference } => {
            let env = EnvSpec::by_name(&env)?;
            let agent = load_checkpoint(&checkpoint)?;
            let ev = evaluate_policy(agent.as_dyn(), &env, episodes, seed)?;
            println!("return: {:.4} ± {:.4} over {episodes} episodes", ev.mean, ev.stderr);
            if let Some(p) = reference {
                let r = reference_for(&env, Some(&p), &p)?;
                println!(
                    "normalized: {:.2} ± {:.2}",
                    normalized_score(ev.mean, &r)?,
                    100.0 * ev.stderr / (r.expert_return - r.random_return)
                );
            }
        }
        Command::Refscore { env, rollouts, seed, out } => {
            let env = EnvSpec::by_name(&env)?;
            let r = ensbc_core::eval::compute_score_reference(&env, rollouts, seed)?;
            let out = resolve_output(&out);
            if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            r.save(&out)?;
            println!("random {:.4}, expert {:.4}", r.random_return, r.expert_return);
        }
    }
    Ok(())
}

fn write_members(path: &Path, distances: &[f64], q: &ndarray::Array2<f64>) -> Result<()> {
    use std::io::Write;
    let mut out = create(path)?;
    let header: Vec<String> = (0..q.ncols()).map(|i| format!("q{i}")).collect();
    writeln!(out, "distance,{}", header.join(","))?;
    for (d, row) in distances.iter().zip(q.rows()) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{d},{}", cells.join(","))?;
    }
    out.flush()?;
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
