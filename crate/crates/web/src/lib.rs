//! WebAssembly bindings behind `www/index.html`.
//!
//! Three operations are exposed, each returning JSON:
//!
//! - [`rollout_trace`]: one episode of mountain car or the pendulum under a
//!   simple policy, for animation.
//! - [`compare_losses`]: collect a small batch, fit log-loss and squared-loss
//!   FQI on it, and evaluate both greedy policies on the same rollouts.
//! - [`theory_check`]: the randomized inequality checks at a reduced size.
//!
//! The plain-Rust functions are what the tests exercise; the `wasm_*`
//! wrappers only translate errors and serialize.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use fqilab::dataset::collect;
use fqilab::env::{
    evaluate_policy, simulate, ConstantPolicy, Env, EnvKind, EvalSummary, Policy, UniformRandom,
};
use fqilab::experiment::{fit_arm, ExperimentConfig, FitSummary, Overrides};
use fqilab::rng::rng_from_seed;
use fqilab::theory::{verify_all, TheoryConfig, TheoryReport};
use fqilab::{Error, LossKind, Result};

/// Largest batches the comparison accepts, per environment. Mountain car
/// trajectories are several hundred steps long, so its cap is in the same
/// range as the pendulum's in transitions.
pub const MAX_TRAJECTORIES_MOUNTAIN_CAR: usize = 3000;
pub const MAX_TRAJECTORIES_PENDULUM: usize = 800;
pub const MAX_THEORY_INSTANCES: usize = 20_000;

#[derive(Clone, Debug, Serialize)]
pub struct Trace {
    pub env: String,
    pub policy: String,
    /// Visited states, starting with the reset state and ending at the first
    /// absorbing one.
    pub states: Vec<[f64; 2]>,
    pub actions: Vec<usize>,
    pub costs: Vec<f64>,
    pub success: bool,
    pub discounted_cost: f64,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

/// Pushes in the direction of travel (mountain car) or against the lean (pendulum).
fn heuristic(kind: EnvKind) -> impl Fn(&[f64], usize) -> usize {
    move |x: &[f64], _step: usize| {
        let drive = match kind {
            EnvKind::MountainCar => x[1],
            EnvKind::Pendulum => x[0] + 0.5 * x[1],
        };
        if drive >= 0.0 {
            2
        } else {
            0
        }
    }
}

pub fn rollout_trace(env: &str, policy: &str, seed: u64) -> Result<Trace> {
    let kind: EnvKind = env.parse()?;
    let env = Env::new(kind);
    let h = heuristic(kind);
    let pi: &dyn Policy = match policy {
        "random" => &UniformRandom,
        "idle" => &ConstantPolicy(1),
        "heuristic" => &h,
        other => {
            return Err(Error::Config(format!(
                "unknown policy {other:?} (expected random|idle|heuristic)"
            )))
        }
    };
    let mut states = Vec::new();
    let mut actions = Vec::new();
    let mut costs = Vec::new();
    let mut rng = rng_from_seed(seed);
    // Mountain car keeps stepping in place after the goal; the trace stops there.
    let (discounted_cost, success, _) =
        simulate(&env, pi, &mut rng, env.max_steps(), |s, a, out, _| {
            if s.absorbed {
                return;
            }
            if states.is_empty() {
                states.push(s.x);
            }
            states.push(out.next.x);
            actions.push(a);
            costs.push(out.cost);
        })?;
    let b = env.bounds();
    Ok(Trace {
        env: kind.to_string(),
        policy: policy.to_string(),
        states,
        actions,
        costs,
        success,
        discounted_cost,
        lo: b.lo().to_vec(),
        hi: b.hi().to_vec(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ArmResult {
    pub loss: LossKind,
    pub eval: EvalSummary,
    pub fit: FitSummary,
}

#[derive(Clone, Debug, Serialize)]
pub struct Comparison {
    pub env: String,
    pub n_trajectories: usize,
    pub n_transitions: usize,
    pub n_successful: usize,
    pub arms: Vec<ArmResult>,
}

/// Desk-preset settings with the batch size, FQI rounds (`k`, stationary mode
/// only), evaluation rollouts and seed replaced.
pub fn compare_losses(
    env: &str,
    n_trajectories: usize,
    k: usize,
    n_rollouts: usize,
    seed: u64,
) -> Result<Comparison> {
    let kind: EnvKind = env.parse()?;
    let cap = match kind {
        EnvKind::MountainCar => MAX_TRAJECTORIES_MOUNTAIN_CAR,
        EnvKind::Pendulum => MAX_TRAJECTORIES_PENDULUM,
    };
    if n_trajectories == 0 || n_trajectories > cap {
        return Err(Error::Config(format!(
            "batch size must be in 1..={cap} for {kind}"
        )));
    }
    let mut text =
        format!("data.n_grid={n_trajectories}\ntrials.n=1\neval.n_rollouts={n_rollouts}\n");
    if kind == EnvKind::Pendulum {
        text.push_str(&format!("fqi.k={k}\n"));
    }
    let over = Overrides {
        env: Some(kind),
        seed: Some(seed),
        ..Overrides::default()
    };
    let mut cfg = ExperimentConfig::parse(&text, &over)?;
    cfg.data.required_successes = cfg.data.required_successes.min(n_trajectories);
    cfg.validate()?;

    let trial_seed = cfg.trial_seeds[0];
    let data = collect(&cfg.env, &cfg.collect_spec(trial_seed))?;
    let eval_seed = cfg.eval_seed(trial_seed);
    let mut arms = Vec::new();
    for arm in &cfg.arms {
        let run = fit_arm(&cfg, &data, arm)?;
        let eval = evaluate_policy(
            &cfg.env,
            &run.policy(),
            cfg.eval.n_rollouts,
            eval_seed,
            cfg.eval.max_steps,
        )?;
        arms.push(ArmResult {
            loss: arm.loss,
            eval,
            fit: FitSummary::of(&run),
        });
    }
    let m = data.manifest();
    Ok(Comparison {
        env: kind.to_string(),
        n_trajectories: m.n_trajectories,
        n_transitions: data.len(),
        n_successful: m.n_successful,
        arms,
    })
}

pub fn theory_check(seed: u64, instances: usize) -> Result<Vec<TheoryReport>> {
    if instances == 0 || instances > MAX_THEORY_INSTANCES {
        return Err(Error::Config(format!(
            "instances must be in 1..={MAX_THEORY_INSTANCES}"
        )));
    }
    let mut cfg = TheoryConfig::new(seed, instances);
    // Keep the browser responsive: the long-horizon suite dominates otherwise.
    cfg.decomposition_instances = cfg.decomposition_instances.min(200);
    cfg.concentration_trials = 200;
    verify_all(&cfg)
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsError> {
    let value = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&value).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = rolloutTrace)]
pub fn wasm_rollout_trace(
    env: &str,
    policy: &str,
    seed: u32,
) -> std::result::Result<String, JsError> {
    to_js(rollout_trace(env, policy, seed.into()))
}

#[wasm_bindgen(js_name = compareLosses)]
pub fn wasm_compare_losses(
    env: &str,
    n_trajectories: u32,
    k: u32,
    n_rollouts: u32,
    seed: u32,
) -> std::result::Result<String, JsError> {
    to_js(compare_losses(
        env,
        n_trajectories as usize,
        k as usize,
        n_rollouts as usize,
        seed.into(),
    ))
}

#[wasm_bindgen(js_name = theoryCheck)]
pub fn wasm_theory_check(seed: u32, instances: u32) -> std::result::Result<String, JsError> {
    to_js(theory_check(seed.into(), instances as usize))
}
