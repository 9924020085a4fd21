use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fqilab::dataset::{collect, Dataset};
use fqilab::env::{evaluate_policy, EnvKind};
use fqilab::experiment::{fit_arm, report, run_experiment, ExperimentConfig, Overrides, Preset, SavedPolicy};
use fqilab::theory::{verify_all, TheoryConfig};
use fqilab::{Error, Result};

#[derive(Parser)]
#[command(name = "fqilab", version, about = "Fitted Q-iteration with log-loss or squared loss")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file of dotted key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scale of the defaults.
    #[arg(long, value_parser = parse_preset)]
    preset: Option<Preset>,
    /// Environment (mountain_car or pendulum).
    #[arg(long, value_parser = parse_env)]
    env: Option<EnvKind>,
    /// Base seed from which trial seeds are derived.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Collect one trial's dataset with the uniform-random policy.
    Collect {
        #[command(flatten)]
        common: Common,
        /// Trial whose seed is used.
        #[arg(long, default_value_t = 0)]
        trial: usize,
    },
    /// Fit every loss arm on a dataset and save the greedy policies.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset file; collected from the first trial seed when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Train on the first N trajectories only.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Evaluate saved policies with the config's evaluation settings.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Policy files written by `train`.
        #[arg(long, required = true)]
        policy: Vec<PathBuf>,
    },
    /// Collect, train and evaluate every trial on the whole grid.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Aggregate result files into learning-curve tables and plots.
    Report {
        /// results.csv files from one or more runs.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
    /// Check the lemma inequalities on random instances.
    VerifyTheory {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Instances for the pointwise and norm suites (MDP suites scale with this).
        #[arg(long, default_value_t = 10_000)]
        instances: usize,
        /// Write theory.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_preset(s: &str) -> std::result::Result<Preset, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_env(s: &str) -> std::result::Result<EnvKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load_config(c: &Common, env_fallback: Option<EnvKind>) -> Result<ExperimentConfig> {
    let over = Overrides { preset: c.preset, env: c.env, seed: c.seed, out_dir: c.out.clone() };
    let text = match &c.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
        None => String::new(),
    };
    match ExperimentConfig::parse(&text, &over) {
        Err(Error::Config(_)) if over.env.is_none() && env_fallback.is_some() => {
            ExperimentConfig::parse(&text, &Overrides { env: env_fallback, ..over })
        }
        r => r,
    }
}

fn write_json(dir: &Path, name: &str, value: &impl serde::Serialize) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(path)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Collect { common, trial } => {
            let cfg = load_config(&common, None)?;
            let seed = *cfg
                .trial_seeds
                .get(trial)
                .ok_or_else(|| Error::Config(format!("trial {trial} out of range ({} trials)", cfg.trial_seeds.len())))?;
            let data = collect(&cfg.env, &cfg.collect_spec(seed))?;
            std::fs::create_dir_all(&cfg.out_dir)?;
            let path = cfg.out_dir.join("dataset.txt");
            data.save(&path)?;
            let m = data.manifest();
            println!(
                "{}: {} trajectories ({} successful), {} transitions, {} episodes drawn",
                path.display(),
                m.n_trajectories,
                m.n_successful,
                data.len(),
                m.draws
            );
        }
        Command::Train { common, data, n } => {
            let cfg = load_config(&common, None)?;
            let full = match &data {
                Some(p) => Dataset::load_for_env(p, cfg.env.name())?,
                None => collect(&cfg.env, &cfg.collect_spec(cfg.trial_seeds[0]))?,
            };
            let data = match n {
                Some(n) => full.take_prefix(n)?,
                None => full,
            };
            for arm in &cfg.arms {
                let fitted = fit_arm(&cfg, &data, arm)?;
                let saved = SavedPolicy::from_run(&cfg, arm.loss, &fitted, &data);
                std::fs::create_dir_all(&cfg.out_dir)?;
                let path = cfg.out_dir.join(format!("policy_{}.json", arm.loss));
                saved.save(&path)?;
                let f = &saved.fit;
                println!(
                    "{}: {} fits, {} optimizer iterations, {} not converged, final loss {:.6e}",
                    path.display(),
                    f.n_fits,
                    f.total_iters,
                    f.not_converged,
                    f.final_loss
                );
            }
        }
        Command::Eval { common, policy } => {
            let saved = policy.iter().map(|p| SavedPolicy::load(p)).collect::<Result<Vec<_>>>()?;
            let cfg = load_config(&common, Some(saved[0].env.kind()))?;
            for (path, s) in policy.iter().zip(&saved) {
                if s.env.kind() != cfg.env.kind() {
                    return Err(Error::Config(format!("{} was trained on {}, config is {}", path.display(), s.env.name(), cfg.env.name())));
                }
                let summary = evaluate_policy(&s.env, &s.policy()?, cfg.eval.n_rollouts, cfg.eval.seed, cfg.eval.max_steps)?;
                let out = write_json(&cfg.out_dir, &format!("eval_{}.json", s.loss), &summary)?;
                println!(
                    "{} ({}): mean cost {:.6} (se {:.6}), success rate {:.4} (se {:.4}) over {} episodes -> {}",
                    path.display(),
                    s.loss,
                    summary.mean_cost,
                    summary.cost_se,
                    summary.success_rate,
                    summary.success_se,
                    summary.n_rollouts,
                    out.display()
                );
            }
        }
        Command::Run { common } => {
            let cfg = load_config(&common, None)?;
            let output = run_experiment(&cfg)?;
            output.write(&cfg.out_dir)?;
            let failed = output.rows.iter().filter(|r| !r.is_ok()).count();
            println!(
                "{} rows ({failed} failed) written to {}",
                output.rows.len(),
                cfg.out_dir.join("results.csv").display()
            );
            for a in fqilab::experiment::aggregate(&output.rows)? {
                println!(
                    "  {} n={:<6} {:<8} {} = {:.4} (se {:.4}, {} trials)",
                    a.env,
                    a.n_trajectories,
                    a.loss,
                    a.metric.as_str(),
                    a.mean,
                    a.std_error,
                    a.n_trials
                );
            }
        }
        Command::Report { inputs, out } => {
            let rep = report(&inputs, &out)?;
            for f in &rep.files {
                println!("{}", f.display());
            }
        }
        Command::VerifyTheory { seed, instances, out } => {
            if instances == 0 {
                return Err(Error::Config("--instances must be positive".into()));
            }
            let reports = verify_all(&TheoryConfig::new(seed, instances))?;
            for r in &reports {
                println!(
                    "{:<40} {} instances={:<6} worst_violation={:.3e} tolerance={:.1e}",
                    r.lemma_id,
                    if r.pass { "PASS" } else { "FAIL" },
                    r.n_instances,
                    r.worst_violation,
                    r.tolerance
                );
            }
            if let Some(dir) = out {
                write_json(&dir, "theory.json", &reports)?;
            }
            if reports.iter().any(|r| !r.pass) {
                return Err(Error::Run("some inequalities were violated".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
