//! Config-driven experiments: collect datasets, fit both loss arms, evaluate,
//! and aggregate the per-trial results into learning curves.
//!
//! A config is plain text with one dotted `key=value` per line:
//!
//! ```text
//! # pendulum, smaller grid than the preset
//! preset=desk
//! env.name=pendulum
//! data.n_grid=50,100,200
//! trials.n=3
//! ```
//!
//! `preset` and `env.name` select the defaults; every other key then
//! overrides one field. [`ExperimentConfig::to_text`] prints the complete
//! resolved config, which is what run artifacts echo and hash.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bfgs::{BfgsOptions, Termination};
use crate::dataset::{collect, CollectSpec, Dataset, Manifest, DEFAULT_MAX_DRAWS};
use crate::env::{evaluate_policy, mean_and_se, Env, EnvKind, EvalSummary};
use crate::error::{Error, Result};
use crate::features::FourierBasis;
use crate::fqi::{fqi_finite_horizon, fqi_stationary, FqiConfig, FqiRun, GreedyPolicy, Init, SigmoidLinearClass};
use crate::loss::LossKind;
use crate::model::SigmoidLinearModel;
use crate::rng::{derive_seed, PRNG_NAME};
use crate::CODE_VERSION;

/// Version of the result CSV layout; bumped whenever [`RESULT_HEADER`] changes.
pub const SCHEMA_VERSION: u32 = 1;

pub const RESULT_HEADER: &str =
    "schema_version,config_hash,env,loss,n_trajectories,required_successes,trial,trial_seed,metric,value,std_error,status";

pub const TIMING_HEADER: &str = "trial,n_trajectories,loss,seconds";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Full,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "full" => Ok(Preset::Full),
            other => Err(Error::config(format!("unknown preset {other:?} (expected desk|full)"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Desk => "desk",
            Preset::Full => "full",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FqiMode {
    /// One model per step, fitted backwards from the horizon.
    FiniteHorizon,
    /// `k` rounds of the discounted loop.
    Stationary,
}

impl FromStr for FqiMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "finite_horizon" => Ok(FqiMode::FiniteHorizon),
            "stationary" => Ok(FqiMode::Stationary),
            other => Err(Error::config(format!("unknown fqi.mode {other:?} (expected finite_horizon|stationary)"))),
        }
    }
}

impl fmt::Display for FqiMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FqiMode::FiniteHorizon => "finite_horizon",
            FqiMode::Stationary => "stationary",
        })
    }
}

/// What a trial is scored on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Mean episode cost of the greedy policy (lower is better).
    MeanCost,
    /// Fraction of evaluation episodes still balanced at the cutoff.
    BalanceRate,
}

impl Metric {
    pub fn for_env(kind: EnvKind) -> Self {
        match kind {
            EnvKind::MountainCar => Metric::MeanCost,
            EnvKind::Pendulum => Metric::BalanceRate,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::MeanCost => "mean_cost",
            Metric::BalanceRate => "balance_rate",
        }
    }

    fn of(self, e: &EvalSummary) -> (f64, f64) {
        match self {
            Metric::MeanCost => (e.mean_cost, e.cost_se),
            Metric::BalanceRate => (e.success_rate, e.success_se),
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean_cost" => Ok(Metric::MeanCost),
            "balance_rate" => Ok(Metric::BalanceRate),
            other => Err(Error::data(format!("unknown metric {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    /// Load this dataset instead of collecting (single-trial runs only).
    pub path: Option<PathBuf>,
    /// Prefix sizes, in trajectories.
    pub n_grid: Vec<usize>,
    pub required_successes: usize,
    /// Episode length cap during collection.
    pub horizon: usize,
    pub max_draws: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub n_rollouts: usize,
    pub max_steps: usize,
    /// Base seed; trial `t` evaluates both arms on streams of `derive_seed(seed, trial_seed)`.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub preset: Preset,
    pub env: Env,
    pub data: DataSpec,
    pub mode: FqiMode,
    pub fourier_order: usize,
    /// One FQI config per arm; arms must differ in `loss` only.
    pub arms: Vec<FqiConfig>,
    pub eval: EvalSpec,
    /// Base seed the trial seeds were derived from (informational once `trial_seeds` is set).
    pub trial_base_seed: u64,
    /// Dataset seed of every trial.
    pub trial_seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Store fitted parameter vectors in the run artifact.
    pub save_params: bool,
    /// Worker threads for trials; 0 uses every core.
    pub workers: usize,
}

/// Command-line values that take precedence over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub env: Option<EnvKind>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|v| v.trim().parse::<T>().map_err(|_| Error::config(format!("{key}: cannot parse {v:?}"))))
        .collect()
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::config(format!("{key}: cannot parse {value:?}")))
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// Splits config text into `(key, value)` pairs, skipping blanks and `#` comments.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected key=value, got {line:?}", lineno + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::config(format!("line {}: empty key", lineno + 1)));
        }
        if out.iter().any(|(seen, _): &(String, String)| seen == k) {
            return Err(Error::config(format!("line {}: duplicate key {k}", lineno + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl ExperimentConfig {
    /// Defaults for an environment at a given scale.
    pub fn preset(preset: Preset, kind: EnvKind) -> Self {
        let env = Env::new(kind);
        let full = preset == Preset::Full;
        let (mode, k, gamma, grid, required, n_rollouts, trials, save_params) = match kind {
            EnvKind::MountainCar => {
                let grid = if full {
                    vec![1000, 3000, 6000, 9000, 12000, 15000, 18000, 21000, 24000, 27000, 30000]
                } else {
                    vec![250, 500, 1000, 2000, 3000]
                };
                (FqiMode::FiniteHorizon, env.max_steps(), 1.0, grid, 1, 1, if full { 90 } else { 10 }, false)
            }
            EnvKind::Pendulum => {
                let grid = if full { vec![50, 100, 200, 400, 800, 1600] } else { vec![50, 100, 200, 400, 800] };
                let (k, rollouts, trials) = if full { (300, 1000, 90) } else { (100, 200, 10) };
                (FqiMode::Stationary, k, env.discount(), grid, 0, rollouts, trials, true)
            }
        };
        let arm = |loss| FqiConfig {
            loss,
            k,
            gamma,
            optimizer: BfgsOptions::default(),
            init: Init::Zeros,
            target_clip: true,
        };
        let base_seed = 0;
        let mut cfg = ExperimentConfig {
            name: format!("{kind}_{preset}"),
            preset,
            data: DataSpec {
                path: None,
                n_grid: grid,
                required_successes: required,
                horizon: env.max_steps(),
                max_draws: DEFAULT_MAX_DRAWS,
            },
            mode,
            fourier_order: 4,
            arms: LossKind::ALL.into_iter().map(arm).collect(),
            eval: EvalSpec { n_rollouts, max_steps: env.max_steps(), seed: 1 },
            trial_base_seed: base_seed,
            trial_seeds: Vec::new(),
            out_dir: PathBuf::from(format!("runs/{kind}_{preset}")),
            save_params,
            workers: 0,
            env,
        };
        cfg.set_trials(trials, base_seed);
        cfg
    }

    fn set_trials(&mut self, n: usize, base: u64) {
        self.trial_base_seed = base;
        self.trial_seeds = (0..n as u64).map(|i| derive_seed(base, i)).collect();
    }

    /// Parses config text; `over` wins over the file, which wins over the preset.
    pub fn parse(text: &str, over: &Overrides) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let lookup = |key: &str| pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
        let preset = match (over.preset, lookup("preset")) {
            (Some(p), _) => p,
            (None, Some(v)) => v.parse()?,
            (None, None) => Preset::Desk,
        };
        let kind = match (over.env, lookup("env.name")) {
            (Some(k), _) => k,
            (None, Some(v)) => v.parse()?,
            (None, None) => return Err(Error::config("no environment given (set env.name or pass --env)")),
        };
        let mut cfg = Self::preset(preset, kind);
        // trial count and base seed interact, so they are applied together at the end
        let mut n_trials = cfg.trial_seeds.len();
        let mut base = cfg.trial_base_seed;
        let mut explicit_seeds = None;
        for (key, value) in &pairs {
            match key.as_str() {
                "preset" | "env.name" => {}
                "trials.n" => n_trials = parse_value(key, value)?,
                "trials.seed" => base = parse_value(key, value)?,
                "trials.seeds" => explicit_seeds = Some(parse_list::<u64>(key, value)?),
                _ => cfg.apply(key, value)?,
            }
        }
        if let Some(seed) = over.seed {
            base = seed;
            explicit_seeds = None;
        }
        match explicit_seeds {
            Some(seeds) => {
                cfg.trial_base_seed = base;
                cfg.trial_seeds = seeds;
            }
            None => cfg.set_trials(n_trials, base),
        }
        if let Some(dir) = &over.out_dir {
            cfg.out_dir = dir.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, over: &Overrides) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, over)
    }

    /// Sets one field from its dotted key. Arm settings apply to every arm.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let arms = &mut self.arms;
        let mut each = |f: &dyn Fn(&mut FqiConfig)| arms.iter_mut().for_each(f);
        match key {
            "name" => self.name = value.to_string(),
            "data.path" => self.data.path = (!value.is_empty()).then(|| PathBuf::from(value)),
            "data.n_grid" => self.data.n_grid = parse_list(key, value)?,
            "data.required_successes" => self.data.required_successes = parse_value(key, value)?,
            "data.horizon" => self.data.horizon = parse_value(key, value)?,
            "data.max_draws" => self.data.max_draws = parse_value(key, value)?,
            "fqi.mode" => self.mode = value.parse()?,
            "fqi.fourier_order" => self.fourier_order = parse_value(key, value)?,
            "fqi.losses" => {
                let template = self.arms.first().cloned().ok_or_else(|| Error::config("no arms to copy settings from"))?;
                self.arms = parse_list::<String>(key, value)?
                    .iter()
                    .map(|l| Ok(FqiConfig { loss: l.parse()?, ..template.clone() }))
                    .collect::<Result<_>>()?;
            }
            "fqi.k" => {
                let k: usize = parse_value(key, value)?;
                each(&|a| a.k = k);
            }
            "fqi.gamma" => {
                let g: f64 = parse_value(key, value)?;
                each(&|a| a.gamma = g);
            }
            "fqi.init" => {
                let init = match value {
                    "zeros" => Init::Zeros,
                    v => match v.strip_prefix("seeded:") {
                        Some(s) => Init::Seeded(parse_value(key, s)?),
                        None => return Err(Error::config(format!("{key}: expected zeros or seeded:<seed>, got {v:?}"))),
                    },
                };
                each(&|a| a.init = init);
            }
            "fqi.target_clip" => {
                let clip: bool = parse_value(key, value)?;
                each(&|a| a.target_clip = clip);
            }
            "optimizer.grad_tol" => {
                let v: f64 = parse_value(key, value)?;
                each(&|a| a.optimizer.grad_tol = v);
            }
            "optimizer.max_iters" => {
                let v: usize = parse_value(key, value)?;
                each(&|a| a.optimizer.max_iters = v);
            }
            "optimizer.wolfe_c1" => {
                let v: f64 = parse_value(key, value)?;
                each(&|a| a.optimizer.wolfe_c1 = v);
            }
            "optimizer.wolfe_c2" => {
                let v: f64 = parse_value(key, value)?;
                each(&|a| a.optimizer.wolfe_c2 = v);
            }
            "optimizer.max_line_search_steps" => {
                let v: usize = parse_value(key, value)?;
                each(&|a| a.optimizer.max_line_search_steps = v);
            }
            "eval.n_rollouts" => self.eval.n_rollouts = parse_value(key, value)?,
            "eval.max_steps" => self.eval.max_steps = parse_value(key, value)?,
            "eval.seed" => self.eval.seed = parse_value(key, value)?,
            "output.dir" => self.out_dir = PathBuf::from(value),
            "output.save_params" => self.save_params = parse_value(key, value)?,
            "run.workers" => self.workers = parse_value(key, value)?,
            _ => match key.strip_prefix("env.") {
                Some(param) => self.env.set_param(param, value)?,
                None => return Err(Error::config(format!("unknown key {key:?}"))),
            },
        }
        Ok(())
    }

    /// Rejects configs that cannot run, including arms that differ in more than the loss.
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        if self.arms.is_empty() {
            return Err(Error::config("at least one loss arm is required"));
        }
        audit_loss_switch(&self.arms)?;
        for arm in &self.arms {
            arm.optimizer.validate()?;
        }
        let arm = &self.arms[0];
        match self.mode {
            FqiMode::FiniteHorizon => {
                if !(0.0..=1.0).contains(&arm.gamma) {
                    return Err(Error::config("fqi.gamma must lie in [0, 1]"));
                }
            }
            FqiMode::Stationary => {
                if arm.k == 0 || !(0.0..1.0).contains(&arm.gamma) {
                    return Err(Error::config("stationary FQI needs fqi.k >= 1 and fqi.gamma in [0, 1)"));
                }
            }
        }
        if self.data.n_grid.is_empty() || self.data.n_grid.contains(&0) {
            return Err(Error::config("data.n_grid must list positive trajectory counts"));
        }
        if self.data.required_successes > self.data.n_grid.iter().copied().min().unwrap_or(0) {
            return Err(Error::config("data.required_successes exceeds the smallest grid size"));
        }
        if self.data.horizon == 0 || self.data.max_draws == 0 {
            return Err(Error::config("data.horizon and data.max_draws must be positive"));
        }
        if self.fourier_order == 0 {
            return Err(Error::config("fqi.fourier_order must be positive"));
        }
        if self.eval.n_rollouts == 0 || self.eval.max_steps == 0 {
            return Err(Error::config("eval.n_rollouts and eval.max_steps must be positive"));
        }
        if self.trial_seeds.is_empty() {
            return Err(Error::config("at least one trial is required"));
        }
        if self.data.path.is_some() && self.trial_seeds.len() != 1 {
            return Err(Error::config("data.path fixes the dataset, so it needs exactly one trial"));
        }
        Ok(())
    }

    fn arm_text(&self, out: &mut String) {
        let a = &self.arms[0];
        let o = &a.optimizer;
        let init = match a.init {
            Init::Zeros => "zeros".to_string(),
            Init::Seeded(s) => format!("seeded:{s}"),
        };
        let losses: Vec<&str> = self.arms.iter().map(|a| a.loss.as_str()).collect();
        let _ = writeln!(out, "fqi.mode={}", self.mode);
        let _ = writeln!(out, "fqi.fourier_order={}", self.fourier_order);
        let _ = writeln!(out, "fqi.losses={}", losses.join(","));
        let _ = writeln!(out, "fqi.k={}\nfqi.gamma={}\nfqi.init={init}\nfqi.target_clip={}", a.k, a.gamma, a.target_clip);
        let _ = writeln!(
            out,
            "optimizer.grad_tol={}\noptimizer.max_iters={}\noptimizer.wolfe_c1={}\noptimizer.wolfe_c2={}\noptimizer.max_line_search_steps={}",
            o.grad_tol, o.max_iters, o.wolfe_c1, o.wolfe_c2, o.max_line_search_steps
        );
    }

    /// Settings that determine what a result row measures (everything except trials and output).
    fn experiment_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "env.name={}", self.env.name());
        let params = serde_json::to_value(&self.env).expect("env serializes");
        for (k, v) in params.as_object().expect("env serializes to an object") {
            if k != "name" {
                let _ = writeln!(out, "env.{k}={v}");
            }
        }
        if let Some(p) = &self.data.path {
            let _ = writeln!(out, "data.path={}", p.display());
        }
        let d = &self.data;
        let _ = writeln!(out, "data.n_grid={}", join(&d.n_grid));
        let _ = writeln!(out, "data.required_successes={}\ndata.horizon={}\ndata.max_draws={}", d.required_successes, d.horizon, d.max_draws);
        self.arm_text(&mut out);
        let e = &self.eval;
        let _ = writeln!(out, "eval.n_rollouts={}\neval.max_steps={}\neval.seed={}", e.n_rollouts, e.max_steps, e.seed);
        out
    }

    /// The full resolved config; parsing it back yields the same config.
    pub fn to_text(&self) -> String {
        let mut out = format!("name={}\npreset={}\n", self.name, self.preset);
        out += &self.experiment_text();
        let _ = writeln!(out, "trials.seed={}\ntrials.seeds={}", self.trial_base_seed, join(&self.trial_seeds));
        let _ = writeln!(out, "output.dir={}\noutput.save_params={}\nrun.workers={}", self.out_dir.display(), self.save_params, self.workers);
        out
    }

    /// Fingerprint of the settings rows depend on; trial seeds and output paths are excluded
    /// so that runs over different trials of one experiment can be pooled.
    pub fn config_hash(&self) -> String {
        format!("{:016x}", crate::dataset::fnv1a64(self.experiment_text().as_bytes()))
    }

    pub fn metric(&self) -> Metric {
        Metric::for_env(self.env.kind())
    }

    pub fn model_class(&self) -> Result<SigmoidLinearClass> {
        Ok(SigmoidLinearClass {
            basis: FourierBasis::new(self.env.bounds(), self.fourier_order)?,
            n_actions: self.env.n_actions(),
        })
    }

    /// Collection settings for one trial, sized for the largest grid point.
    pub fn collect_spec(&self, trial_seed: u64) -> CollectSpec {
        CollectSpec {
            n_trajectories: self.data.n_grid.iter().copied().max().unwrap_or(0),
            required_successes: self.data.required_successes,
            seed: trial_seed,
            horizon: Some(self.data.horizon),
            max_draws: self.data.max_draws,
        }
    }

    pub fn eval_seed(&self, trial_seed: u64) -> u64 {
        derive_seed(self.eval.seed, trial_seed)
    }
}

/// Checks that the arms' serialized configs differ in the `loss` field only.
pub fn audit_loss_switch(arms: &[FqiConfig]) -> Result<()> {
    let strip = |a: &FqiConfig| -> Result<serde_json::Value> {
        let mut v = serde_json::to_value(a)?;
        v.as_object_mut().expect("config serializes to an object").remove("loss");
        Ok(v)
    };
    let first = match arms.first() {
        Some(a) => strip(a)?,
        None => return Ok(()),
    };
    for (i, arm) in arms.iter().enumerate().skip(1) {
        if strip(arm)? != first {
            return Err(Error::config(format!("arm {i} ({}) differs from arm 0 in more than the loss", arm.loss)));
        }
        if arms[..i].iter().any(|a| a.loss == arm.loss) {
            return Err(Error::config(format!("loss {} appears in two arms", arm.loss)));
        }
    }
    Ok(())
}

/// One (trial, dataset size, arm) outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub config_hash: String,
    pub env: String,
    pub loss: LossKind,
    pub n_trajectories: usize,
    pub required_successes: usize,
    pub trial: usize,
    pub trial_seed: u64,
    pub metric: Metric,
    /// NaN when the arm failed.
    pub value: f64,
    /// Standard error over evaluation episodes.
    pub std_error: f64,
    /// `ok`, or `failed: <reason>`.
    pub status: String,
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if matches!(c, ',' | '\n' | '\r') { ';' } else { c }).collect()
}

impl ResultRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    pub fn to_csv_line(&self) -> String {
        format!(
            "{SCHEMA_VERSION},{},{},{},{},{},{},{},{},{},{},{}",
            self.config_hash,
            self.env,
            self.loss,
            self.n_trajectories,
            self.required_successes,
            self.trial,
            self.trial_seed,
            self.metric.as_str(),
            self.value,
            self.std_error,
            sanitize(&self.status)
        )
    }

    pub fn from_csv_line(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 12 {
            return Err(Error::data(format!("expected 12 fields, got {}: {line:?}", f.len())));
        }
        let num = |i: usize| -> Result<f64> { f[i].parse().map_err(|_| Error::data(format!("bad number {:?}", f[i]))) };
        let int = |i: usize| -> Result<u64> { f[i].parse().map_err(|_| Error::data(format!("bad integer {:?}", f[i]))) };
        if int(0)? != u64::from(SCHEMA_VERSION) {
            return Err(Error::data(format!("schema version {} is not {SCHEMA_VERSION}", f[0])));
        }
        Ok(ResultRow {
            config_hash: f[1].to_string(),
            env: f[2].to_string(),
            loss: f[3].parse().map_err(|_| Error::data(format!("bad loss {:?}", f[3])))?,
            n_trajectories: int(4)? as usize,
            required_successes: int(5)? as usize,
            trial: int(6)? as usize,
            trial_seed: int(7)?,
            metric: f[8].parse()?,
            value: num(9)?,
            std_error: num(10)?,
            status: f[11].to_string(),
        })
    }
}

pub fn rows_to_csv(rows: &[ResultRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(RESULT_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv_line());
        out.push('\n');
    }
    out
}

pub fn rows_from_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == RESULT_HEADER => {}
        Some(h) => return Err(Error::data(format!("unexpected result header {h:?}"))),
        None => return Err(Error::data("empty result file")),
    }
    lines.filter(|l| !l.is_empty()).map(ResultRow::from_csv_line).collect()
}

/// Optimizer statistics of one FQI run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub n_fits: usize,
    pub total_iters: usize,
    pub total_evals: usize,
    /// Fits that ended on the iteration cap or a failed line search.
    pub not_converged: usize,
    pub max_grad_norm: f64,
    /// Training loss of the last fit (the step-0 fit for finite-horizon runs).
    pub final_loss: f64,
}

impl FitSummary {
    pub fn of<M>(run: &FqiRun<M>) -> Self {
        let fitted = run.reports.iter().filter(|r| r.termination.is_some());
        let last = if run.finite_horizon { run.reports.first() } else { run.reports.last() };
        FitSummary {
            n_fits: fitted.clone().count(),
            total_iters: run.reports.iter().map(|r| r.optimizer_iters).sum(),
            total_evals: run.reports.iter().map(|r| r.n_evals).sum(),
            not_converged: fitted.filter(|r| r.termination != Some(Termination::GradTol)).count(),
            max_grad_norm: run.reports.iter().map(|r| r.grad_norm).fold(0.0, f64::max),
            final_loss: last.map_or(f64::NAN, |r| r.loss_value),
        }
    }
}

/// Artifact record of one arm on one dataset prefix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmRecord {
    pub n_trajectories: usize,
    pub loss: LossKind,
    pub status: String,
    pub eval: Option<EvalSummary>,
    pub fit: Option<FitSummary>,
    /// Policy parameters, one vector per model (per step for finite-horizon runs).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub trial_seed: u64,
    pub eval_seed: u64,
    pub manifest: Option<Manifest>,
    pub arms: Vec<ArmRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunArtifact {
    pub code_version: String,
    pub prng: String,
    pub config_hash: String,
    pub config: String,
    pub env: Env,
    pub arms: Vec<FqiConfig>,
    pub trials: Vec<TrialRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub trial: usize,
    pub n_trajectories: usize,
    pub loss: LossKind,
    pub seconds: f64,
}

/// Everything a run produces; [`ExperimentOutput::write`] saves it.
#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub rows: Vec<ResultRow>,
    pub artifact: RunArtifact,
    pub timings: Vec<Timing>,
}

impl ExperimentOutput {
    pub fn csv(&self) -> String {
        rows_to_csv(&self.rows)
    }

    /// Writes `results.csv`, `artifact.json` and `timings.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("results.csv"), self.csv())?;
        fs::write(dir.join("artifact.json"), serde_json::to_string_pretty(&self.artifact)? + "\n")?;
        let mut t = String::from(TIMING_HEADER);
        t.push('\n');
        for x in &self.timings {
            let _ = writeln!(t, "{},{},{},{:.3}", x.trial, x.n_trajectories, x.loss, x.seconds);
        }
        fs::write(dir.join("timings.csv"), t)?;
        Ok(())
    }
}

/// Fitted greedy policy for one arm.
pub fn fit_arm(cfg: &ExperimentConfig, data: &Dataset, arm: &FqiConfig) -> Result<FqiRun<SigmoidLinearModel>> {
    let class = cfg.model_class()?;
    match cfg.mode {
        FqiMode::FiniteHorizon => fqi_finite_horizon(data, cfg.data.horizon, &class, arm),
        FqiMode::Stationary => fqi_stationary(data, &class, arm),
    }
}

struct TrialOutput {
    rows: Vec<ResultRow>,
    record: TrialRecord,
    timings: Vec<Timing>,
}

fn load_or_collect(cfg: &ExperimentConfig, seed: u64) -> Result<Dataset> {
    match &cfg.data.path {
        Some(p) => {
            let d = Dataset::load_for_env(p, cfg.env.name())?;
            if d.manifest().physics_hash != cfg.env.physics_hash() {
                return Err(Error::config(format!("{} was collected with different physics constants", p.display())));
            }
            Ok(d)
        }
        None => collect(&cfg.env, &cfg.collect_spec(seed)),
    }
}

fn run_trial(cfg: &ExperimentConfig, trial: usize, seed: u64, hash: &str) -> TrialOutput {
    let metric = cfg.metric();
    let eval_seed = cfg.eval_seed(seed);
    let row = |n: usize, loss: LossKind, value: f64, se: f64, status: String| ResultRow {
        config_hash: hash.to_string(),
        env: cfg.env.name().to_string(),
        loss,
        n_trajectories: n,
        required_successes: cfg.data.required_successes,
        trial,
        trial_seed: seed,
        metric,
        value,
        std_error: se,
        status,
    };
    let mut out = TrialOutput {
        rows: Vec::new(),
        record: TrialRecord { trial, trial_seed: seed, eval_seed, manifest: None, arms: Vec::new() },
        timings: Vec::new(),
    };
    let full = match load_or_collect(cfg, seed) {
        Ok(d) => d,
        Err(e) => {
            let status = format!("failed: {e}");
            for &n in &cfg.data.n_grid {
                for arm in &cfg.arms {
                    out.rows.push(row(n, arm.loss, f64::NAN, f64::NAN, status.clone()));
                    out.record.arms.push(ArmRecord { n_trajectories: n, loss: arm.loss, status: status.clone(), eval: None, fit: None, params: None });
                }
            }
            return out;
        }
    };
    out.record.manifest = Some(full.manifest().clone());
    for &n in &cfg.data.n_grid {
        let prefix = full.take_prefix(n);
        for arm in &cfg.arms {
            let start = Instant::now();
            let result = prefix.as_ref().map_err(|e| Error::Data(e.to_string())).and_then(|data| {
                let run = fit_arm(cfg, data, arm)?;
                let eval = evaluate_policy(&cfg.env, &run.policy(), cfg.eval.n_rollouts, eval_seed, cfg.eval.max_steps)?;
                Ok((run, eval))
            });
            out.timings.push(Timing { trial, n_trajectories: n, loss: arm.loss, seconds: start.elapsed().as_secs_f64() });
            match result {
                Ok((run, eval)) => {
                    let (value, se) = metric.of(&eval);
                    out.rows.push(row(n, arm.loss, value, se, "ok".into()));
                    let params = cfg.save_params.then(|| policy_params(&run));
                    out.record.arms.push(ArmRecord {
                        n_trajectories: n,
                        loss: arm.loss,
                        status: "ok".into(),
                        eval: Some(eval),
                        fit: Some(FitSummary::of(&run)),
                        params,
                    });
                }
                Err(e) => {
                    let status = format!("failed: {e}");
                    out.rows.push(row(n, arm.loss, f64::NAN, f64::NAN, status.clone()));
                    out.record.arms.push(ArmRecord { n_trajectories: n, loss: arm.loss, status, eval: None, fit: None, params: None });
                }
            }
        }
    }
    out
}

fn policy_params(run: &FqiRun<SigmoidLinearModel>) -> Vec<Vec<f64>> {
    run.policy().models.iter().map(|m| m.params().to_vec()).collect()
}

/// Runs every trial, fitting each arm on every grid prefix. Rows come out in
/// (trial, n, arm) order whatever the worker count; an arm that fails is
/// recorded in its row and the run continues.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let hash = cfg.config_hash();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Run(format!("cannot start worker pool: {e}")))?;
    let trials: Vec<TrialOutput> = pool.install(|| {
        cfg.trial_seeds
            .par_iter()
            .enumerate()
            .map(|(t, &seed)| run_trial(cfg, t, seed, &hash))
            .collect()
    });
    let mut rows = Vec::new();
    let mut timings = Vec::new();
    let mut records = Vec::new();
    for t in trials {
        rows.extend(t.rows);
        timings.extend(t.timings);
        records.push(t.record);
    }
    let artifact = RunArtifact {
        code_version: CODE_VERSION.to_string(),
        prng: PRNG_NAME.to_string(),
        config_hash: hash,
        config: cfg.to_text(),
        env: cfg.env.clone(),
        arms: cfg.arms.clone(),
        trials: records,
    };
    Ok(ExperimentOutput { rows, artifact, timings })
}

/// A greedy policy saved to disk by `train` and read back by `eval`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SavedPolicy {
    pub env: Env,
    pub loss: LossKind,
    pub mode: FqiMode,
    pub fourier_order: usize,
    pub n_actions: usize,
    /// One parameter vector per model; step-indexed for finite-horizon policies.
    pub params: Vec<Vec<f64>>,
    pub fit: FitSummary,
    pub dataset: Manifest,
}

impl SavedPolicy {
    pub fn from_run(cfg: &ExperimentConfig, loss: LossKind, run: &FqiRun<SigmoidLinearModel>, data: &Dataset) -> Self {
        SavedPolicy {
            env: cfg.env.clone(),
            loss,
            mode: cfg.mode,
            fourier_order: cfg.fourier_order,
            n_actions: cfg.env.n_actions(),
            params: policy_params(run),
            fit: FitSummary::of(run),
            dataset: data.manifest().clone(),
        }
    }

    pub fn policy(&self) -> Result<GreedyPolicy<SigmoidLinearModel>> {
        let basis = FourierBasis::new(self.env.bounds(), self.fourier_order)?;
        if self.params.is_empty() {
            return Err(Error::data("saved policy has no models"));
        }
        let models = self
            .params
            .iter()
            .map(|p| SigmoidLinearModel::new(basis.clone(), self.n_actions, p.clone()))
            .collect::<Result<_>>()?;
        Ok(GreedyPolicy { models })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format { path: path.to_path_buf(), msg: e.to_string() })
    }
}

/// Mean and standard error of one (env, loss, n, required successes) group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub env: String,
    pub loss: LossKind,
    pub required_successes: usize,
    pub n_trajectories: usize,
    pub metric: Metric,
    pub n_trials: usize,
    pub n_failed: usize,
    pub mean: f64,
    /// Sample SD over trials divided by the square root of their number;
    /// a single trial passes its own evaluation standard error through.
    pub std_error: f64,
}

pub const AGGREGATE_HEADER: &str = "env,loss,required_successes,n_trajectories,metric,n_trials,n_failed,mean,std_error";

/// Groups rows and averages over trials. Rows of one environment must come
/// from one experiment definition (equal config hashes), and no
/// (trial seed, n, loss) may repeat.
pub fn aggregate(rows: &[ResultRow]) -> Result<Vec<Aggregate>> {
    let mut hashes: BTreeMap<&str, &str> = BTreeMap::new();
    let mut seen = std::collections::HashSet::new();
    type Key<'a> = (&'a str, usize, usize, &'static str);
    let mut groups: BTreeMap<Key<'_>, (LossKind, Metric, Vec<&ResultRow>)> = BTreeMap::new();
    for r in rows {
        match hashes.get(r.env.as_str()) {
            Some(&h) if h != r.config_hash => {
                return Err(Error::data(format!(
                    "{} rows come from incompatible experiments (config hashes {h} and {})",
                    r.env, r.config_hash
                )))
            }
            _ => {
                hashes.insert(&r.env, &r.config_hash);
            }
        }
        if !seen.insert((r.env.as_str(), r.trial_seed, r.n_trajectories, r.loss)) {
            return Err(Error::data(format!(
                "duplicate row: {} trial seed {} n {} loss {}",
                r.env, r.trial_seed, r.n_trajectories, r.loss
            )));
        }
        groups
            .entry((&r.env, r.required_successes, r.n_trajectories, r.loss.as_str()))
            .or_insert((r.loss, r.metric, Vec::new()))
            .2
            .push(r);
    }
    Ok(groups
        .into_iter()
        .map(|((env, required, n, _), (loss, metric, members))| {
            let ok: Vec<&ResultRow> = members.iter().copied().filter(|r| r.is_ok()).collect();
            let values: Vec<f64> = ok.iter().map(|r| r.value).collect();
            let (mean, se) = match ok.as_slice() {
                [single] => (single.value, single.std_error),
                _ => mean_and_se(&values),
            };
            Aggregate {
                env: env.to_string(),
                loss,
                required_successes: required,
                n_trajectories: n,
                metric,
                n_trials: ok.len(),
                n_failed: members.len() - ok.len(),
                mean,
                std_error: se,
            }
        })
        .collect())
}

/// Files written by [`report`].
#[derive(Clone, Debug, PartialEq)]
pub struct ReportOutput {
    pub aggregates: Vec<Aggregate>,
    pub files: Vec<PathBuf>,
}

/// Aggregates result files into `dir`: `aggregate.csv`, plus one plot-data
/// table and one SVG line plot per (env, required successes) curve family.
pub fn report(inputs: &[PathBuf], dir: &Path) -> Result<ReportOutput> {
    if inputs.is_empty() {
        return Err(Error::config("report needs at least one result file"));
    }
    let mut rows = Vec::new();
    for p in inputs {
        let text = fs::read_to_string(p)?;
        rows.extend(rows_from_csv(&text).map_err(|e| Error::Format { path: p.clone(), msg: e.to_string() })?);
    }
    let aggregates = aggregate(&rows)?;
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();

    let mut agg = String::from(AGGREGATE_HEADER);
    agg.push('\n');
    for a in &aggregates {
        let _ = writeln!(
            agg,
            "{},{},{},{},{},{},{},{},{}",
            a.env,
            a.loss,
            a.required_successes,
            a.n_trajectories,
            a.metric.as_str(),
            a.n_trials,
            a.n_failed,
            a.mean,
            a.std_error
        );
    }
    let path = dir.join("aggregate.csv");
    fs::write(&path, agg)?;
    files.push(path);

    let mut families: BTreeMap<(&str, usize), Vec<&Aggregate>> = BTreeMap::new();
    for a in &aggregates {
        families.entry((&a.env, a.required_successes)).or_default().push(a);
    }
    for ((env, required), members) in families {
        let stem = format!("curve_{env}_r{required}");
        let path = dir.join(format!("{stem}.dat"));
        fs::write(&path, curve_table(&members))?;
        files.push(path);
        let path = dir.join(format!("{stem}.svg"));
        fs::write(&path, curve_svg(&format!("{env}, {required} required successes"), &members))?;
        files.push(path);
    }
    Ok(ReportOutput { aggregates, files })
}

fn losses_in(members: &[&Aggregate]) -> Vec<LossKind> {
    LossKind::ALL.into_iter().filter(|l| members.iter().any(|a| a.loss == *l)).collect()
}

fn grid_in(members: &[&Aggregate]) -> Vec<usize> {
    let mut ns: Vec<usize> = members.iter().map(|a| a.n_trajectories).collect();
    ns.sort_unstable();
    ns.dedup();
    ns
}

/// Whitespace-separated table: `n` then mean and SE per loss.
fn curve_table(members: &[&Aggregate]) -> String {
    let losses = losses_in(members);
    let mut out = format!("# {}\nn", members[0].metric.as_str());
    for l in &losses {
        let _ = write!(out, " {l}_mean {l}_se");
    }
    out.push('\n');
    for n in grid_in(members) {
        let _ = write!(out, "{n}");
        for l in &losses {
            match members.iter().find(|a| a.loss == *l && a.n_trajectories == n) {
                Some(a) => {
                    let _ = write!(out, " {} {}", a.mean, a.std_error);
                }
                None => out.push_str(" nan nan"),
            }
        }
        out.push('\n');
    }
    out
}

fn curve_svg(title: &str, members: &[&Aggregate]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const L: f64 = 70.0;
    const R: f64 = 20.0;
    const T: f64 = 40.0;
    const B: f64 = 60.0;
    let ns = grid_in(members);
    let (lo, hi) = (ns[0] as f64, *ns.last().unwrap() as f64);
    let x_of = |n: usize| {
        if hi > lo {
            L + (W - L - R) * ((n as f64).ln() - lo.ln()) / (hi.ln() - lo.ln())
        } else {
            L + (W - L - R) / 2.0
        }
    };
    let y_of = |v: f64| T + (H - T - B) * (1.0 - v.clamp(0.0, 1.0));
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{title}</text>"#, W / 2.0);
    let _ = writeln!(s, r#"<line x1="{L}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, H - B, W - R, H - B);
    let _ = writeln!(s, r#"<line x1="{L}" y1="{T}" x2="{L}" y2="{}" stroke="black"/>"#, H - B);
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let y = y_of(tick);
        let _ = writeln!(s, r#"<line x1="{}" y1="{y}" x2="{L}" y2="{y}" stroke="black"/><text x="{}" y="{}" text-anchor="end">{tick}</text>"#, L - 5.0, L - 8.0, y + 4.0);
    }
    for &n in &ns {
        let x = x_of(n);
        let _ = writeln!(s, r#"<line x1="{x}" y1="{}" x2="{x}" y2="{}" stroke="black"/><text x="{x}" y="{}" text-anchor="middle">{n}</text>"#, H - B, H - B + 5.0, H - B + 20.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">trajectories</text>"#, (L + W - R) / 2.0, H - 15.0);
    let _ = writeln!(s, r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>"#, (T + H - B) / 2.0, (T + H - B) / 2.0, members[0].metric.as_str());
    for (i, loss) in losses_in(members).into_iter().enumerate() {
        let color = ["#c0392b", "#2c6fbb"][i % 2];
        let mut pts: Vec<&&Aggregate> = members.iter().filter(|a| a.loss == loss && a.mean.is_finite()).collect();
        pts.sort_by_key(|a| a.n_trajectories);
        let line: Vec<String> = pts.iter().map(|a| format!("{:.1},{:.1}", x_of(a.n_trajectories), y_of(a.mean))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, line.join(" "));
        for a in pts {
            let (x, se) = (x_of(a.n_trajectories), if a.std_error.is_finite() { a.std_error } else { 0.0 });
            let _ = writeln!(s, r#"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="{color}"/><circle cx="{x:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, y_of(a.mean - se), y_of(a.mean + se), y_of(a.mean));
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" fill="{color}">FQI-{loss}</text>"#, W - R - 90.0, T + 15.0 + 16.0 * i as f64);
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(kind: EnvKind) -> ExperimentConfig {
        let text = match kind {
            EnvKind::MountainCar => "env.name=mountain_car\nenv.horizon=60\ndata.horizon=60\neval.max_steps=60\ndata.n_grid=3,6\ndata.required_successes=0\ntrials.n=2\n",
            EnvKind::Pendulum => "env.name=pendulum\ndata.n_grid=5,10\nfqi.k=3\neval.n_rollouts=4\neval.max_steps=50\ntrials.n=2\n",
        };
        ExperimentConfig::parse(text, &Overrides::default()).unwrap()
    }

    #[test]
    fn presets_match_the_documented_defaults() {
        let mc = ExperimentConfig::preset(Preset::Desk, EnvKind::MountainCar);
        assert_eq!(mc.data.n_grid, vec![250, 500, 1000, 2000, 3000]);
        assert_eq!((mc.data.horizon, mc.data.required_successes, mc.trial_seeds.len()), (800, 1, 10));
        assert_eq!((mc.mode, mc.arms[0].gamma, mc.eval.n_rollouts), (FqiMode::FiniteHorizon, 1.0, 1));
        let pen = ExperimentConfig::preset(Preset::Desk, EnvKind::Pendulum);
        assert_eq!((pen.mode, pen.arms[0].k, pen.arms[0].gamma), (FqiMode::Stationary, 100, 0.95));
        assert_eq!((pen.eval.n_rollouts, pen.eval.max_steps, pen.trial_seeds.len()), (200, 3000, 10));
        let full = ExperimentConfig::preset(Preset::Full, EnvKind::Pendulum);
        assert_eq!((full.arms[0].k, full.eval.n_rollouts, full.trial_seeds.len()), (300, 1000, 90));
        for c in [mc, pen, full] {
            c.validate().unwrap();
            assert_eq!(c.arms.iter().map(|a| a.loss).collect::<Vec<_>>(), LossKind::ALL.to_vec());
        }
    }

    #[test]
    fn text_round_trip() {
        let text = "# comment\nenv.name=pendulum\npreset=full\nenv.noise=5\nfqi.k=7\noptimizer.grad_tol=1e-7\nfqi.init=seeded:9\ntrials.seeds=4,5\n\noutput.dir=/tmp/x\n";
        let cfg = ExperimentConfig::parse(text, &Overrides::default()).unwrap();
        assert_eq!(cfg.trial_seeds, vec![4, 5]);
        assert_eq!(cfg.arms[1].init, Init::Seeded(9));
        assert_eq!(cfg.arms[0].optimizer.grad_tol, 1e-7);
        let again = ExperimentConfig::parse(&cfg.to_text(), &Overrides::default()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.config_hash(), cfg.config_hash());
    }

    #[test]
    fn overrides_win() {
        let over = Overrides { preset: Some(Preset::Desk), env: Some(EnvKind::Pendulum), seed: Some(3), out_dir: Some("o".into()) };
        let cfg = ExperimentConfig::parse("env.name=mountain_car\ntrials.seeds=1,2\noutput.dir=x\n", &over).unwrap();
        assert_eq!(cfg.env.kind(), EnvKind::Pendulum);
        assert_eq!(cfg.trial_base_seed, 3);
        assert_eq!(cfg.trial_seeds, (0..10).map(|i| derive_seed(3, i)).collect::<Vec<_>>());
        assert_eq!(cfg.out_dir, PathBuf::from("o"));
    }

    #[test]
    fn hash_ignores_trials_and_output() {
        let a = tiny(EnvKind::Pendulum);
        let mut b = a.clone();
        b.trial_seeds = vec![99];
        b.out_dir = "elsewhere".into();
        b.name = "other".into();
        assert_eq!(a.config_hash(), b.config_hash());
        b.eval.n_rollouts += 1;
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn config_errors() {
        let o = Overrides::default();
        for bad in [
            "data.n_grid=5\n",
            "env.name=pendulum\nbogus=1\n",
            "env.name=pendulum\nenv.gravity=x\n",
            "env.name=pendulum\nenv.wings=2\n",
            "env.name=pendulum\nfqi.gamma=1\n",
            "env.name=pendulum\nfqi.k=0\n",
            "env.name=pendulum\ndata.n_grid=\n",
            "env.name=pendulum\ndata.required_successes=60\n",
            "env.name=pendulum\nfqi.losses=log,log\n",
            "env.name=pendulum\nfqi.losses=hinge\n",
            "env.name=pendulum\ndata.path=d.txt\n",
            "env.name=pendulum\nfqi.k=3\nfqi.k=4\n",
            "env.name=pendulum\nnot a pair\n",
            "env.name=venus\n",
            "preset=huge\nenv.name=pendulum\n",
        ] {
            let err = ExperimentConfig::parse(bad, &o).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{bad:?}: {err}");
        }
    }

    #[test]
    fn loss_switch_audit() {
        let cfg = tiny(EnvKind::Pendulum);
        audit_loss_switch(&cfg.arms).unwrap();
        let mut arms = cfg.arms.clone();
        arms[1].optimizer.max_iters += 1;
        assert!(audit_loss_switch(&arms).is_err());
        let mut bad = cfg.clone();
        bad.arms[1].gamma = 0.5;
        assert!(matches!(run_experiment(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn csv_round_trip_and_header() {
        let out = run_experiment(&tiny(EnvKind::Pendulum)).unwrap();
        assert_eq!(out.rows.len(), 2 * 2 * 2);
        let csv = out.csv();
        assert!(csv.starts_with(RESULT_HEADER));
        let back = rows_from_csv(&csv).unwrap();
        assert_eq!(back.len(), out.rows.len());
        for (a, b) in back.iter().zip(&out.rows) {
            assert_eq!(a.to_csv_line(), b.to_csv_line());
        }
        assert!(rows_from_csv("wrong,header\n").is_err());
        let mut failed = out.rows[0].clone();
        failed.status = "failed: a, b\nc".into();
        failed.value = f64::NAN;
        let parsed = ResultRow::from_csv_line(&failed.to_csv_line()).unwrap();
        assert!(parsed.value.is_nan() && !parsed.is_ok());
    }

    #[test]
    fn rows_come_in_trial_n_arm_order() {
        let mut cfg = tiny(EnvKind::MountainCar);
        cfg.workers = 2;
        let out = run_experiment(&cfg).unwrap();
        let order: Vec<(usize, usize, LossKind)> = out.rows.iter().map(|r| (r.trial, r.n_trajectories, r.loss)).collect();
        let mut expected = Vec::new();
        for t in 0..2 {
            for n in [3, 6] {
                for l in LossKind::ALL {
                    expected.push((t, n, l));
                }
            }
        }
        assert_eq!(order, expected);
        assert!(out.rows.iter().all(|r| r.is_ok() && r.metric == Metric::MeanCost));
        cfg.workers = 1;
        assert_eq!(run_experiment(&cfg).unwrap().csv(), out.csv());
    }

    #[test]
    fn collection_failure_is_recorded_per_row() {
        let mut cfg = tiny(EnvKind::MountainCar);
        cfg.data.required_successes = 2;
        cfg.data.max_draws = 5;
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.rows.len(), 8);
        assert!(out.rows.iter().all(|r| r.status.starts_with("failed") && r.value.is_nan()));
    }

    fn synthetic_row(seed: u64, loss: LossKind, n: usize, value: f64) -> ResultRow {
        ResultRow {
            config_hash: "h".into(),
            env: "pendulum".into(),
            loss,
            n_trajectories: n,
            required_successes: 0,
            trial: seed as usize,
            trial_seed: seed,
            metric: Metric::BalanceRate,
            value,
            std_error: 0.01,
            status: "ok".into(),
        }
    }

    #[test]
    fn aggregate_examples() {
        let one = aggregate(&[synthetic_row(0, LossKind::Log, 10, 0.7)]).unwrap();
        assert_eq!((one[0].mean, one[0].std_error, one[0].n_trials), (0.7, 0.01, 1));
        let two = aggregate(&[synthetic_row(0, LossKind::Log, 10, 0.25), synthetic_row(1, LossKind::Log, 10, 0.75)]).unwrap();
        assert_eq!(two[0].mean, 0.5);
        assert!((two[0].std_error - 0.25).abs() < 1e-15);

        let mut dup = vec![synthetic_row(0, LossKind::Log, 10, 0.1), synthetic_row(0, LossKind::Log, 10, 0.2)];
        assert!(aggregate(&dup).is_err());
        dup[1].trial_seed = 1;
        dup[1].config_hash = "other".into();
        assert!(aggregate(&dup).is_err());
    }

    #[test]
    fn report_writes_curves() {
        let dir = std::env::temp_dir().join(format!("fqilab-report-{}", std::process::id()));
        let rows: Vec<ResultRow> = (0..3u64)
            .flat_map(|s| [10, 20].into_iter().flat_map(move |n| LossKind::ALL.map(|l| synthetic_row(s, l, n, 0.1 * s as f64))))
            .collect();
        fs::create_dir_all(&dir).unwrap();
        let input = dir.join("results.csv");
        fs::write(&input, rows_to_csv(&rows)).unwrap();
        let out = report(&[input], &dir).unwrap();
        assert_eq!(out.aggregates.len(), 4);
        let table = fs::read_to_string(dir.join("curve_pendulum_r0.dat")).unwrap();
        assert_eq!(table.lines().nth(1).unwrap(), "n log_mean log_se squared_mean squared_se");
        assert!(fs::read_to_string(dir.join("curve_pendulum_r0.svg")).unwrap().contains("<polyline"));
        fs::remove_dir_all(&dir).unwrap();
    }
}
