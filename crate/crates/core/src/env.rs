//! Mountain car and inverted pendulum, rollouts and policy evaluation.
//!
//! Both environments have a two-dimensional state, three actions and an
//! absorbing terminal region (goal reached, pendulum fallen). Costs are
//! sparse and incurred at most once per episode, so every discounted episode
//! cost lies in `[0, 1]`:
//!
//! - mountain car runs for a fixed horizon (800 steps) and charges 1 on the
//!   last step unless the goal was reached; the car stays put after reaching
//!   the goal and the episode keeps running to the horizon;
//! - the pendulum charges 1 on the step where it falls past horizontal and
//!   the episode ends there.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::BoxBounds;
use crate::rng::{child_rng, Rng};

pub const N_ACTIONS: usize = 3;
pub const STATE_DIM: usize = 2;

fn check_action(action: usize) -> Result<()> {
    if action < N_ACTIONS {
        Ok(())
    } else {
        Err(Error::domain(format!("action {action} is not one of 0, 1, 2")))
    }
}

// ---------------------------------------------------------------------------
// mountain car

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MountainCarParams {
    pub force: f64,
    pub gravity: f64,
    /// Frequency of the hill profile in the gravity term `cos(freq * x)`.
    pub hill_freq: f64,
    pub min_position: f64,
    pub max_position: f64,
    pub max_speed: f64,
    pub goal_position: f64,
    pub start_position: f64,
    pub start_velocity: f64,
    pub horizon: usize,
}

impl Default for MountainCarParams {
    fn default() -> Self {
        MountainCarParams {
            force: 0.001,
            gravity: 0.0025,
            hill_freq: 3.0,
            min_position: -1.2,
            max_position: 0.6,
            max_speed: 0.07,
            goal_position: 0.5,
            start_position: -0.5,
            start_velocity: 0.0,
            horizon: 800,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MountainCarState {
    pub position: f64,
    pub velocity: f64,
    /// Goal reached; absorbing.
    pub done: bool,
}

pub fn mountain_car_step(p: &MountainCarParams, state: MountainCarState, action: usize) -> Result<MountainCarState> {
    check_action(action)?;
    if state.done {
        return Ok(state);
    }
    let x = state.position;
    let v = (state.velocity + p.force * (action as f64 - 1.0) - p.gravity * (p.hill_freq * x).cos())
        .clamp(-p.max_speed, p.max_speed);
    let x_next = (x + v).clamp(p.min_position, p.max_position);
    let v_next = if x_next <= p.min_position { 0.0 } else { v };
    Ok(MountainCarState { position: x_next, velocity: v_next, done: x_next >= p.goal_position })
}

/// Cost of step `step` (0-based) of an episode of `horizon` steps that lands in `next`.
pub fn mountain_car_cost(next: &MountainCarState, step: usize, horizon: usize) -> f64 {
    if step + 1 == horizon && !next.done {
        1.0
    } else {
        0.0
    }
}

// ---------------------------------------------------------------------------
// pendulum

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendulumParams {
    pub gravity: f64,
    pub pole_mass: f64,
    pub cart_mass: f64,
    pub pole_length: f64,
    /// Magnitude of the left/right force; action `a` applies `force * (a - 1)`.
    pub force: f64,
    /// Additive force noise is uniform on `[-noise, noise]`.
    pub noise: f64,
    pub dt: f64,
    pub max_angular_velocity: f64,
    /// Start angle and angular velocity are uniform on `[-start_spread, start_spread]`.
    pub start_spread: f64,
    pub discount: f64,
    /// Episodes are cut off here if the pendulum has not fallen.
    pub max_steps: usize,
}

impl Default for PendulumParams {
    fn default() -> Self {
        PendulumParams {
            gravity: 9.8,
            pole_mass: 2.0,
            cart_mass: 8.0,
            pole_length: 0.5,
            force: 50.0,
            noise: 10.0,
            dt: 0.1,
            max_angular_velocity: 5.0,
            start_spread: 0.05,
            discount: 0.95,
            max_steps: 3000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendulumState {
    pub angle: f64,
    pub angular_velocity: f64,
    /// Past horizontal; absorbing.
    pub fallen: bool,
}

/// Angular acceleration for applied force `u`.
pub fn pendulum_accel(p: &PendulumParams, angle: f64, angular_velocity: f64, u: f64) -> f64 {
    let alpha = 1.0 / (p.pole_mass + p.cart_mass);
    let (m, l) = (p.pole_mass, p.pole_length);
    let num = p.gravity * angle.sin()
        - alpha * m * l * angular_velocity * angular_velocity * (2.0 * angle).sin() / 2.0
        - alpha * angle.cos() * u;
    let den = 4.0 * l / 3.0 - alpha * m * l * angle.cos() * angle.cos();
    num / den
}

/// One explicit Euler step. On falling the angle is held at `±pi/2` so that
/// stored states stay inside the feature box.
pub fn pendulum_step(p: &PendulumParams, state: PendulumState, action: usize, noise: f64) -> Result<PendulumState> {
    check_action(action)?;
    if !(noise.abs() <= p.noise) {
        return Err(Error::domain(format!("force noise {noise} outside [-{0}, {0}]", p.noise)));
    }
    if state.fallen {
        return Ok(state);
    }
    let u = p.force * (action as f64 - 1.0) + noise;
    let acc = pendulum_accel(p, state.angle, state.angular_velocity, u);
    let angle = state.angle + p.dt * state.angular_velocity;
    let angular_velocity =
        (state.angular_velocity + p.dt * acc).clamp(-p.max_angular_velocity, p.max_angular_velocity);
    let half_pi = std::f64::consts::FRAC_PI_2;
    let fallen = angle.abs() > half_pi;
    Ok(PendulumState { angle: angle.clamp(-half_pi, half_pi), angular_velocity, fallen })
}

pub fn pendulum_cost(state: &PendulumState, next: &PendulumState) -> f64 {
    if !state.fallen && next.fallen {
        1.0
    } else {
        0.0
    }
}

// ---------------------------------------------------------------------------
// common interface

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    MountainCar,
    Pendulum,
}

impl EnvKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EnvKind::MountainCar => "mountain_car",
            EnvKind::Pendulum => "pendulum",
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mountain_car" => Ok(EnvKind::MountainCar),
            "pendulum" => Ok(EnvKind::Pendulum),
            other => Err(Error::config(format!("unknown environment {other:?} (expected mountain_car|pendulum)"))),
        }
    }
}

/// Environment state: two coordinates and the absorbing flag.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvState {
    pub x: [f64; STATE_DIM],
    pub absorbed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Env {
    MountainCar(MountainCarParams),
    Pendulum(PendulumParams),
}

/// Outcome of one environment step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Step {
    pub next: EnvState,
    pub cost: f64,
    /// No bootstrapping past this transition.
    pub terminal: bool,
}

impl Env {
    pub fn new(kind: EnvKind) -> Self {
        match kind {
            EnvKind::MountainCar => Env::MountainCar(MountainCarParams::default()),
            EnvKind::Pendulum => Env::Pendulum(PendulumParams::default()),
        }
    }

    pub fn kind(&self) -> EnvKind {
        match self {
            Env::MountainCar(_) => EnvKind::MountainCar,
            Env::Pendulum(_) => EnvKind::Pendulum,
        }
    }

    pub fn name(&self) -> &'static str {
        self.kind().as_str()
    }

    pub fn n_actions(&self) -> usize {
        N_ACTIONS
    }

    pub fn discount(&self) -> f64 {
        match self {
            Env::MountainCar(_) => 1.0,
            Env::Pendulum(p) => p.discount,
        }
    }

    /// Episode length limit: the fixed horizon for mountain car, the cutoff for the pendulum.
    pub fn max_steps(&self) -> usize {
        match self {
            Env::MountainCar(p) => p.horizon,
            Env::Pendulum(p) => p.max_steps,
        }
    }

    pub fn bounds(&self) -> BoxBounds {
        let (lo, hi) = match self {
            Env::MountainCar(p) => (vec![p.min_position, -p.max_speed], vec![p.max_position, p.max_speed]),
            Env::Pendulum(p) => {
                let h = std::f64::consts::FRAC_PI_2;
                (vec![-h, -p.max_angular_velocity], vec![h, p.max_angular_velocity])
            }
        };
        BoxBounds::new(lo, hi).expect("environment bounds are nondegenerate")
    }

    /// Sets one physics constant by field name.
    pub fn set_param(&mut self, key: &str, value: &str) -> Result<()> {
        let mut json = serde_json::to_value(&*self)?;
        let obj = json.as_object_mut().expect("params serialize to an object");
        let slot = obj
            .get_mut(key)
            .filter(|_| key != "name")
            .ok_or_else(|| Error::config(format!("{} has no parameter {key:?}", self.name())))?;
        *slot = match slot {
            serde_json::Value::Number(n) if n.is_u64() => value
                .parse::<u64>()
                .map(Into::into)
                .map_err(|_| Error::config(format!("{key} must be a nonnegative integer, got {value:?}")))?,
            _ => {
                let v: f64 = value.parse().map_err(|_| Error::config(format!("{key} must be a number, got {value:?}")))?;
                serde_json::Number::from_f64(v)
                    .map(serde_json::Value::Number)
                    .ok_or_else(|| Error::config(format!("{key} must be finite")))?
            }
        };
        let updated: Env = serde_json::from_value(json).map_err(|e| Error::config(format!("{key}: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Env::MountainCar(p) => {
                p.min_position < p.max_position
                    && p.max_speed > 0.0
                    && p.horizon >= 1
                    && (p.min_position..=p.max_position).contains(&p.start_position)
                    && p.start_velocity.abs() <= p.max_speed
            }
            Env::Pendulum(p) => {
                p.pole_mass > 0.0
                    && p.cart_mass >= 0.0
                    && p.pole_length > 0.0
                    && p.noise >= 0.0
                    && p.dt > 0.0
                    && p.max_angular_velocity > 0.0
                    && (0.0..std::f64::consts::FRAC_PI_2).contains(&p.start_spread)
                    && p.start_spread <= p.max_angular_velocity
                    && (0.0..1.0).contains(&p.discount)
                    && p.max_steps >= 1
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("inconsistent {} parameters", self.name())))
        }
    }

    /// Stable fingerprint of the physics constants.
    pub fn physics_hash(&self) -> String {
        use std::hash::Hasher;
        let mut h = fnv::FnvHasher::default();
        h.write(serde_json::to_string(self).expect("params serialize").as_bytes());
        format!("{:016x}", h.finish())
    }

    pub fn reset(&self, rng: &mut Rng) -> EnvState {
        match self {
            Env::MountainCar(p) => EnvState { x: [p.start_position, p.start_velocity], absorbed: false },
            Env::Pendulum(p) => {
                let s = p.start_spread;
                let angle = if s > 0.0 { rng.random_range(-s..=s) } else { 0.0 };
                let vel = if s > 0.0 { rng.random_range(-s..=s) } else { 0.0 };
                EnvState { x: [angle, vel], absorbed: false }
            }
        }
    }

    /// Advances from `state` at 0-based `step`; pendulum noise is drawn from `rng`.
    pub fn step(&self, state: &EnvState, action: usize, step: usize, rng: &mut Rng) -> Result<Step> {
        match self {
            Env::MountainCar(p) => {
                let s = MountainCarState { position: state.x[0], velocity: state.x[1], done: state.absorbed };
                let n = mountain_car_step(p, s, action)?;
                let next = EnvState { x: [n.position, n.velocity], absorbed: n.done };
                Ok(Step { next, cost: mountain_car_cost(&n, step, p.horizon), terminal: n.done || step + 1 >= p.horizon })
            }
            Env::Pendulum(p) => {
                let s = PendulumState { angle: state.x[0], angular_velocity: state.x[1], fallen: state.absorbed };
                let noise = if p.noise > 0.0 { rng.random_range(-p.noise..=p.noise) } else { 0.0 };
                let n = pendulum_step(p, s, action, noise)?;
                let next = EnvState { x: [n.angle, n.angular_velocity], absorbed: n.fallen };
                Ok(Step { next, cost: pendulum_cost(&s, &n), terminal: n.fallen })
            }
        }
    }

    /// Whether an episode can stop after a transition with this outcome.
    fn episode_over(&self, step: &Step) -> bool {
        matches!(self, Env::Pendulum(_)) && step.terminal
    }

    /// Success of an episode ending in `last` after `len` steps.
    fn success(&self, last: &EnvState, len: usize) -> bool {
        match self {
            Env::MountainCar(_) => last.absorbed,
            Env::Pendulum(p) => !last.absorbed && len >= p.max_steps,
        }
    }
}

// ---------------------------------------------------------------------------
// policies and rollouts

pub trait Policy {
    /// Action at `state`, the 0-based `step` of the episode.
    fn act(&self, state: &[f64], step: usize, rng: &mut Rng) -> Result<usize>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct UniformRandom;

impl Policy for UniformRandom {
    fn act(&self, _state: &[f64], _step: usize, rng: &mut Rng) -> Result<usize> {
        Ok(rng.random_range(0..N_ACTIONS))
    }
}

/// Always the same action.
#[derive(Clone, Copy, Debug)]
pub struct ConstantPolicy(pub usize);

impl Policy for ConstantPolicy {
    fn act(&self, _state: &[f64], _step: usize, _rng: &mut Rng) -> Result<usize> {
        Ok(self.0)
    }
}

impl<F: Fn(&[f64], usize) -> usize> Policy for F {
    fn act(&self, state: &[f64], step: usize, _rng: &mut Rng) -> Result<usize> {
        Ok(self(state, step))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryStep {
    pub state: [f64; STATE_DIM],
    pub action: usize,
    pub cost: f64,
    pub next_state: [f64; STATE_DIM],
    pub step: usize,
    pub terminal: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
    pub success: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `sum_h gamma^(h-1) C_h`.
    pub fn discounted_cost(&self, gamma: f64) -> f64 {
        let mut w = 1.0;
        let mut total = 0.0;
        for s in &self.steps {
            total += w * s.cost;
            w *= gamma;
        }
        total
    }
}

/// Runs one episode with randomness from `rng`, reporting every transition
/// to `visit`. Returns (discounted cost, success, length).
pub fn simulate(
    env: &Env,
    policy: &dyn Policy,
    rng: &mut Rng,
    max_steps: usize,
    mut visit: impl FnMut(&EnvState, usize, &Step, usize),
) -> Result<(f64, bool, usize)> {
    let gamma = env.discount();
    let mut state = env.reset(rng);
    let mut total = 0.0;
    let mut weight = 1.0;
    let mut len = 0;
    while len < max_steps {
        let action = policy.act(&state.x, len, rng)?;
        let out = env.step(&state, action, len, rng)?;
        visit(&state, action, &out, len);
        total += weight * out.cost;
        weight *= gamma;
        state = out.next;
        len += 1;
        if env.episode_over(&out) {
            break;
        }
    }
    Ok((total, env.success(&state, len), len))
}

/// Runs one episode from a stream seeded by `seed`, keeping every transition.
pub fn rollout(env: &Env, policy: &dyn Policy, seed: u64, max_steps: usize) -> Result<Trajectory> {
    let mut rng = crate::rng::rng_from_seed(seed);
    let mut steps = Vec::new();
    let (_, success, _) = simulate(env, policy, &mut rng, max_steps, |s, a, out, h| {
        steps.push(TrajectoryStep { state: s.x, action: a, cost: out.cost, next_state: out.next.x, step: h, terminal: out.terminal })
    })?;
    Ok(Trajectory { steps, success })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n_rollouts: usize,
    /// Mean discounted episode cost.
    pub mean_cost: f64,
    pub cost_se: f64,
    /// Fraction of successful episodes (goal reached / still balanced).
    pub success_rate: f64,
    pub success_se: f64,
}

/// Mean and standard error of the mean (sample standard deviation over `sqrt(n)`; zero for `n = 1`).
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Evaluates `policy` over `n_rollouts` episodes; episode `i` uses stream `i` of `seed`.
pub fn evaluate_policy(env: &Env, policy: &dyn Policy, n_rollouts: usize, seed: u64, max_steps: usize) -> Result<EvalSummary> {
    if n_rollouts == 0 {
        return Err(Error::config("evaluation needs at least one rollout"));
    }
    let mut costs = Vec::with_capacity(n_rollouts);
    let mut wins = Vec::with_capacity(n_rollouts);
    for i in 0..n_rollouts {
        let mut rng = child_rng(seed, i as u64);
        let (cost, success, _) = simulate(env, policy, &mut rng, max_steps, |_, _, _, _| {})?;
        costs.push(cost);
        wins.push(if success { 1.0 } else { 0.0 });
    }
    let (mean_cost, cost_se) = mean_and_se(&costs);
    let (success_rate, success_se) = mean_and_se(&wins);
    Ok(EvalSummary { n_rollouts, mean_cost, cost_se, success_rate, success_se })
}
