//! Fitted Q-iteration with a switchable regression loss.
//!
//! [`fqi_stationary`] runs `k` rounds of
//! `f_j = argmin_f sum_i loss(f(S_i, A_i), C_i + gamma * min_a f_{j-1}(S'_i, a))`,
//! warm-starting each regression from the previous round.
//! [`fqi_finite_horizon`] fits one model per step by backward induction,
//! regressing step `h` only on transitions recorded at step `h`.
//!
//! Terminal transitions drop the bootstrap term. Targets are clipped into
//! `[0, 1]` unless `target_clip` is off, in which case an out-of-range target
//! is an error.

use std::borrow::Cow;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bfgs::{BfgsOptions, Termination};
use crate::dataset::Dataset;
use crate::env::Policy;
use crate::error::{Error, Result};
use crate::features::FourierBasis;
use crate::loss::{log_loss, squared_loss, LossKind, Prob};
use crate::mdp::argmin;
use crate::model::{state_index, tabular_fit, QModel, RegressionBatch, SigmoidLinearModel, TabularQModel};
use crate::mdp::QTable;
use crate::rng::{rng_from_seed, Rng};

/// Starting function `f_0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// `f_0 = 0`; parametric fits start from all-zero parameters.
    Zeros,
    /// A random member of the class drawn from this seed.
    Seeded(u64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FqiConfig {
    pub loss: LossKind,
    /// Rounds of the stationary loop (unused by the finite-horizon variant).
    pub k: usize,
    pub gamma: f64,
    pub optimizer: BfgsOptions,
    pub init: Init,
    pub target_clip: bool,
}

impl FqiConfig {
    pub fn new(loss: LossKind, k: usize, gamma: f64) -> Self {
        FqiConfig { loss, k, gamma, optimizer: BfgsOptions::default(), init: Init::Zeros, target_clip: true }
    }

    fn validate(&self, finite_horizon: bool) -> Result<()> {
        self.optimizer.validate()?;
        if !finite_horizon && self.k == 0 {
            return Err(Error::config("FQI needs at least one round"));
        }
        let gamma_ok = if finite_horizon { (0.0..=1.0).contains(&self.gamma) } else { (0.0..1.0).contains(&self.gamma) };
        if !gamma_ok {
            return Err(Error::config(format!(
                "discount {} out of range (1 is allowed only with a finite horizon)",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// Outcome of one regression.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Mean training loss at the returned fit.
    pub loss_value: f64,
    pub n_samples: usize,
    pub optimizer_iters: usize,
    pub n_evals: usize,
    pub grad_norm: f64,
    /// `None` for closed-form fits.
    pub termination: Option<Termination>,
}

impl FitReport {
    fn skipped() -> Self {
        FitReport { loss_value: 0.0, n_samples: 0, optimizer_iters: 0, n_evals: 0, grad_norm: 0.0, termination: None }
    }
}

/// A function class FQI can regress onto.
pub trait ModelClass {
    type Model: QModel + Clone;
    /// Per-state data reused across rounds (features, indices).
    type Encoded;

    /// Encodes row-major states with `dim` coordinates each.
    fn encode(&self, states: &[f64], dim: usize) -> Result<Self::Encoded>;

    fn initial(&self, init: Init) -> Result<Self::Model>;

    /// `min_a f(s, a)` for every encoded state.
    fn min_values(&self, model: &Self::Model, states: &Self::Encoded) -> Vec<f64>;

    fn fit(
        &self,
        states: &Self::Encoded,
        actions: &[usize],
        targets: Vec<f64>,
        loss: LossKind,
        opts: &BfgsOptions,
        start: &Self::Model,
    ) -> Result<(Self::Model, FitReport)>;
}

/// Sigmoid of per-action linear functions of Fourier features.
#[derive(Clone, Debug, PartialEq)]
pub struct SigmoidLinearClass {
    pub basis: FourierBasis,
    pub n_actions: usize,
}

impl ModelClass for SigmoidLinearClass {
    type Model = SigmoidLinearModel;
    /// Row-major feature matrix.
    type Encoded = Vec<f64>;

    fn encode(&self, states: &[f64], dim: usize) -> Result<Vec<f64>> {
        if dim != self.basis.dim() {
            return Err(Error::shape(format!("states have {dim} coordinates, basis expects {}", self.basis.dim())));
        }
        let m = self.basis.n_features();
        let mut out = vec![0.0; states.len() / dim * m];
        for (row, s) in out.chunks_exact_mut(m).zip(states.chunks_exact(dim)) {
            self.basis.features_into(s, row)?;
        }
        Ok(out)
    }

    fn initial(&self, init: Init) -> Result<SigmoidLinearModel> {
        let n = self.n_actions * self.basis.n_features();
        let params = match init {
            Init::Zeros => vec![0.0; n],
            Init::Seeded(seed) => {
                let mut rng = rng_from_seed(seed);
                (0..n).map(|_| 0.1 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)).collect()
            }
        };
        SigmoidLinearModel::new(self.basis.clone(), self.n_actions, params)
    }

    fn min_values(&self, model: &SigmoidLinearModel, features: &Vec<f64>) -> Vec<f64> {
        let m = self.basis.n_features();
        let mut q = vec![0.0; self.n_actions];
        features
            .chunks_exact(m)
            .map(|phi| {
                model.q_values_from_features(phi, &mut q);
                q.iter().copied().fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    fn fit(
        &self,
        features: &Vec<f64>,
        actions: &[usize],
        targets: Vec<f64>,
        loss: LossKind,
        opts: &BfgsOptions,
        start: &SigmoidLinearModel,
    ) -> Result<(SigmoidLinearModel, FitReport)> {
        let m = self.basis.n_features();
        let batch = RegressionBatch::from_features(m, self.n_actions, Cow::Borrowed(features), Cow::Borrowed(actions), targets)?;
        let result = match batch.fit(start.params(), loss, opts) {
            Ok(r) => r,
            // the warm start can be unusable (non-finite objective); retry from zero
            Err(_) => batch
                .fit(&vec![0.0; start.n_params()], loss, opts)
                .map_err(|e| Error::Run(format!("regression failed from every start: {e}")))?,
        };
        let report = FitReport {
            loss_value: result.f_star,
            n_samples: batch.len(),
            optimizer_iters: result.iters,
            n_evals: result.n_evals,
            grad_norm: result.grad_norm,
            termination: Some(result.termination),
        };
        Ok((start.with_params(result.x_star)?, report))
    }
}

/// All functions `S x A -> [0, 1]` on a finite state space.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TabularClass {
    pub n_states: usize,
    pub n_actions: usize,
}

impl ModelClass for TabularClass {
    type Model = TabularQModel;
    type Encoded = Vec<usize>;

    fn encode(&self, states: &[f64], dim: usize) -> Result<Vec<usize>> {
        if dim != 1 {
            return Err(Error::shape("tabular states have one coordinate"));
        }
        states.iter().map(|s| state_index(std::slice::from_ref(s), self.n_states)).collect()
    }

    fn initial(&self, init: Init) -> Result<TabularQModel> {
        match init {
            Init::Zeros => TabularQModel::filled(self.n_states, self.n_actions, 0.0),
            Init::Seeded(seed) => {
                let mut rng = rng_from_seed(seed);
                let v = (0..self.n_states * self.n_actions).map(|_| rng.random::<f64>()).collect();
                TabularQModel::new(QTable::new(self.n_states, self.n_actions, v)?)
            }
        }
    }

    fn min_values(&self, model: &TabularQModel, states: &Vec<usize>) -> Vec<f64> {
        let mins = model.values().min_over_actions();
        states.iter().map(|&s| mins[s]).collect()
    }

    fn fit(
        &self,
        states: &Vec<usize>,
        actions: &[usize],
        targets: Vec<f64>,
        loss: LossKind,
        _opts: &BfgsOptions,
        _start: &TabularQModel,
    ) -> Result<(TabularQModel, FitReport)> {
        let model = tabular_fit(self.n_states, self.n_actions, states, actions, &targets, loss)?;
        let total: f64 = states
            .iter()
            .zip(actions)
            .zip(&targets)
            .map(|((&s, &a), &t)| {
                let y = model.values().get(s, a);
                match loss {
                    LossKind::Log => log_loss(Prob::saturating(y), Prob::saturating(t)),
                    LossKind::Squared => squared_loss(y, t),
                }
            })
            .sum();
        let n = targets.len();
        let report = FitReport {
            loss_value: if n == 0 { 0.0 } else { total / n as f64 },
            n_samples: n,
            optimizer_iters: 0,
            n_evals: 0,
            grad_norm: 0.0,
            termination: None,
        };
        Ok((model, report))
    }
}

/// Models and fit reports of one FQI run.
#[derive(Clone, Debug)]
pub struct FqiRun<M> {
    /// Stationary: `f_1, ..., f_k`. Finite horizon: the model of step `h` at index `h`.
    pub models: Vec<M>,
    pub reports: Vec<FitReport>,
    pub finite_horizon: bool,
}

impl<M: QModel + Clone> FqiRun<M> {
    pub fn final_model(&self) -> &M {
        self.models.last().expect("a run has at least one model")
    }

    /// Greedy policy: stationary in `f_k`, or step-indexed for finite-horizon runs.
    pub fn policy(&self) -> GreedyPolicy<M> {
        if self.finite_horizon {
            GreedyPolicy { models: self.models.clone() }
        } else {
            GreedyPolicy { models: vec![self.final_model().clone()] }
        }
    }
}

/// Greedy policy of one model, or of one model per step (the last is reused past the end).
#[derive(Clone, Debug)]
pub struct GreedyPolicy<M> {
    pub models: Vec<M>,
}

impl<M: QModel> Policy for GreedyPolicy<M> {
    fn act(&self, state: &[f64], step: usize, _rng: &mut Rng) -> Result<usize> {
        let model = &self.models[step.min(self.models.len() - 1)];
        model.greedy_action(state)
    }
}

/// `argmin_a f(state, a)`, ties to the smallest index.
pub fn greedy_action(model: &impl QModel, state: &[f64]) -> Result<usize> {
    model.greedy_action(state)
}

fn finish_targets(costs: impl Iterator<Item = f64>, boot: impl Iterator<Item = f64>, clip: bool) -> Result<Vec<f64>> {
    costs
        .zip(boot)
        .map(|(c, b)| {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::data(format!("cost {c} is not in [0, 1]")));
            }
            let t = c + b;
            if clip {
                Ok(t.clamp(0.0, 1.0))
            } else if (0.0..=1.0).contains(&t) {
                Ok(t)
            } else {
                Err(Error::data(format!("regression target {t} leaves [0, 1]; enable target clipping")))
            }
        })
        .collect()
}

/// `C_i + gamma * min_a f_prev(S'_i, a)` (just `C_i` on terminal transitions).
pub fn compute_targets(data: &Dataset, f_prev: &impl QModel, gamma: f64, clip: bool) -> Result<Vec<f64>> {
    let boot = data
        .iter()
        .map(|t| {
            if t.terminal || gamma == 0.0 {
                Ok(0.0)
            } else {
                let q = f_prev.q_values(t.next_state)?;
                Ok(gamma * q.iter().copied().fold(f64::INFINITY, f64::min))
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    finish_targets(data.costs().iter().copied(), boot.into_iter(), clip)
}

/// Stationary discounted FQI for `cfg.k` rounds.
pub fn fqi_stationary<C: ModelClass>(data: &Dataset, class: &C, cfg: &FqiConfig) -> Result<FqiRun<C::Model>> {
    cfg.validate(false)?;
    if data.is_empty() {
        return Err(Error::data("FQI needs a nonempty dataset"));
    }
    let states = class.encode(data.states(), data.dim())?;
    let next = class.encode(data.next_states(), data.dim())?;
    let live: Vec<bool> = data.terminals().iter().map(|t| !t).collect();

    let mut current = class.initial(cfg.init)?;
    let mut models = Vec::with_capacity(cfg.k);
    let mut reports = Vec::with_capacity(cfg.k);
    for round in 0..cfg.k {
        let boot: Vec<f64> = if round == 0 && cfg.init == Init::Zeros {
            vec![0.0; data.len()]
        } else {
            class.min_values(&current, &next)
        };
        let targets = finish_targets(
            data.costs().iter().copied(),
            boot.iter().zip(&live).map(|(b, &l)| if l { cfg.gamma * b } else { 0.0 }),
            cfg.target_clip,
        )?;
        let (model, report) = class.fit(&states, data.actions(), targets, cfg.loss, &cfg.optimizer, &current)?;
        models.push(model.clone());
        reports.push(report);
        current = model;
    }
    Ok(FqiRun { models, reports, finite_horizon: false })
}

/// Finite-horizon FQI: for `h = H-1, ..., 0`, regress step-`h` transitions
/// on `C_i + gamma * min_a f_{h+1}(S'_i, a)` with `f_H = 0`. A step without
/// data copies the model of the following step.
pub fn fqi_finite_horizon<C: ModelClass>(data: &Dataset, horizon: usize, class: &C, cfg: &FqiConfig) -> Result<FqiRun<C::Model>> {
    cfg.validate(true)?;
    if horizon == 0 {
        return Err(Error::config("horizon must be positive"));
    }
    if let Some(&h) = data.steps().iter().find(|&&h| h >= horizon) {
        return Err(Error::data(format!("transition at step {h} beyond horizon {horizon}")));
    }
    let by_step = data.indices_by_step();
    let dim = data.dim();

    let mut models: Vec<Option<C::Model>> = vec![None; horizon];
    let mut reports = vec![FitReport::skipped(); horizon];
    let mut later: Option<C::Model> = None;
    let start = class.initial(cfg.init)?;
    for h in (0..horizon).rev() {
        let idx: &[usize] = by_step.get(h).map_or(&[], |v| v.as_slice());
        if idx.is_empty() {
            models[h] = Some(later.clone().unwrap_or_else(|| start.clone()));
            continue;
        }
        let gather = |src: &[f64]| -> Vec<f64> { idx.iter().flat_map(|&i| src[i * dim..(i + 1) * dim].iter().copied()).collect() };
        let states = class.encode(&gather(data.states()), dim)?;
        let actions: Vec<usize> = idx.iter().map(|&i| data.actions()[i]).collect();
        let boot: Vec<f64> = match &later {
            None => vec![0.0; idx.len()],
            Some(f) => {
                let next = class.encode(&gather(data.next_states()), dim)?;
                class.min_values(f, &next)
            }
        };
        let targets = finish_targets(
            idx.iter().map(|&i| data.costs()[i]),
            idx.iter().zip(&boot).map(|(&i, b)| if data.terminals()[i] { 0.0 } else { cfg.gamma * b }),
            cfg.target_clip,
        )?;
        let warm = later.as_ref().unwrap_or(&start);
        let (model, report) = class.fit(&states, &actions, targets, cfg.loss, &cfg.optimizer, warm)?;
        reports[h] = report;
        models[h] = Some(model.clone());
        later = Some(model);
    }
    let models = models.into_iter().map(|m| m.expect("every step assigned")).collect();
    Ok(FqiRun { models, reports, finite_horizon: true })
}

/// `argmin` over action values, exposed for callers holding raw values.
pub fn argmin_action(values: &[f64]) -> usize {
    argmin(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{DatasetBuilder, Manifest};
    use crate::features::BoxBounds;
    use crate::mdp::{random_mdp, TabularMdp};
    use crate::rng::child_rng;

    /// Every (s, a) visited `reps` times, next states drawn from the MDP.
    fn tabular_data(mdp: &TabularMdp, reps: usize, seed: u64) -> Dataset {
        let mut rng = child_rng(seed, 0);
        let mut b = DatasetBuilder::new(1, Manifest::synthetic("tabular", 1));
        for s in 0..mdp.n_states() {
            for a in 0..mdp.n_actions() {
                for _ in 0..reps {
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let row = mdp.row(s, a);
                    let mut next = row.len() - 1;
                    for (j, p) in row.iter().enumerate() {
                        acc += p;
                        if u < acc {
                            next = j;
                            break;
                        }
                    }
                    b.push(&[s as f64], a, mdp.cost(s, a), &[next as f64], 0, false).unwrap();
                    b.end_episode(false);
                }
            }
        }
        b.finish().unwrap()
    }

    #[test]
    fn targets_examples() {
        let mut b = DatasetBuilder::new(1, Manifest::synthetic("tabular", 1));
        b.push(&[0.0], 0, 0.0, &[1.0], 0, false).unwrap();
        b.push(&[1.0], 1, 0.3, &[0.0], 1, true).unwrap();
        let d = b.finish().unwrap();
        let zero = TabularQModel::filled(2, 2, 0.0).unwrap();
        assert_eq!(compute_targets(&d, &zero, 0.95, true).unwrap(), vec![0.0, 0.3]);
        let f = TabularQModel::new(QTable::new(2, 2, vec![0.9, 0.9, 0.4, 0.7]).unwrap()).unwrap();
        assert_eq!(compute_targets(&d, &f, 0.0, true).unwrap(), vec![0.0, 0.3]);
        let t = compute_targets(&d, &f, 0.95, true).unwrap();
        assert!((t[0] - 0.38).abs() < 1e-15);
        assert_eq!(t[1], 0.3);
    }

    #[test]
    fn clipping() {
        let mut b = DatasetBuilder::new(1, Manifest::synthetic("tabular", 1));
        b.push(&[0.0], 0, 0.8, &[0.0], 0, false).unwrap();
        let d = b.finish().unwrap();
        let one = TabularQModel::filled(1, 1, 1.0).unwrap();
        assert_eq!(compute_targets(&d, &one, 0.5, true).unwrap(), vec![1.0]);
        assert!(matches!(compute_targets(&d, &one, 0.5, false), Err(Error::Data(_))));
    }

    #[test]
    fn greedy_action_examples() {
        let f = TabularQModel::new(QTable::new(2, 3, vec![0.3, 0.1, 0.2, 0.5, 0.5, 0.5]).unwrap()).unwrap();
        assert_eq!(greedy_action(&f, &[0.0]).unwrap(), 1);
        assert_eq!(greedy_action(&f, &[1.0]).unwrap(), 0);
    }

    #[test]
    fn greedy_action_matches_scan_for_sigmoid_models() {
        let basis = FourierBasis::new(BoxBounds::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap(), 4).unwrap();
        let class = SigmoidLinearClass { basis, n_actions: 3 };
        let mut rng = child_rng(1, 1);
        for seed in 0..50 {
            let m = class.initial(Init::Seeded(seed)).unwrap();
            let s = [rng.random::<f64>(), rng.random::<f64>()];
            let q = m.q_values(&s).unwrap();
            let scan = (0..3).fold(0, |best, a| if q[a] < q[best] { a } else { best });
            assert_eq!(greedy_action(&m, &s).unwrap(), scan);
        }
    }

    #[test]
    fn first_round_regresses_costs() {
        let mdp = random_mdp(3, 3, 2, 0.9).unwrap();
        let d = tabular_data(&mdp, 4, 0);
        let class = TabularClass { n_states: 3, n_actions: 2 };
        let run = fqi_stationary(&d, &class, &FqiConfig::new(LossKind::Log, 1, 0.9)).unwrap();
        for s in 0..3 {
            for a in 0..2 {
                assert!((run.final_model().values().get(s, a) - mdp.cost(s, a)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn tabular_iterates_equal_empirical_backups() {
        let mdp = random_mdp(5, 3, 2, 0.8).unwrap();
        let d = tabular_data(&mdp, 3, 1);
        let class = TabularClass { n_states: 3, n_actions: 2 };
        let run = fqi_stationary(&d, &class, &FqiConfig::new(LossKind::Squared, 5, 0.8)).unwrap();
        let mut prev = QTable::zeros(3, 2);
        for model in &run.models {
            // per-cell mean of C + 0.8 min f_prev(S')
            for s in 0..3 {
                for a in 0..2 {
                    let cell: Vec<f64> = d
                        .iter()
                        .filter(|t| t.state[0] as usize == s && t.action == a)
                        .map(|t| t.cost + 0.8 * prev.min_over_actions()[t.next_state[0] as usize])
                        .collect();
                    let mean = cell.iter().sum::<f64>() / cell.len() as f64;
                    assert!((model.values().get(s, a) - mean).abs() < 1e-14);
                }
            }
            prev = model.values().clone();
        }
    }

    #[test]
    fn log_and_squared_tabular_runs_coincide() {
        let mdp = random_mdp(6, 4, 3, 0.9).unwrap();
        let d = tabular_data(&mdp, 2, 2);
        let class = TabularClass { n_states: 4, n_actions: 3 };
        let log = fqi_stationary(&d, &class, &FqiConfig::new(LossKind::Log, 10, 0.9)).unwrap();
        let sq = fqi_stationary(&d, &class, &FqiConfig::new(LossKind::Squared, 10, 0.9)).unwrap();
        for (a, b) in log.models.iter().zip(&sq.models) {
            assert!(a.values().sup_distance(b.values()) <= 1e-10);
        }
    }

    #[test]
    fn finite_horizon_chain() {
        // 0 -> 1 -> (end); action 0 costs 0.2 at step 0, 0.5 at step 1, action 1 costs 0.4 and 0.1
        let mut b = DatasetBuilder::new(1, Manifest::synthetic("chain", 2));
        for (a0, c0) in [(0usize, 0.2), (1, 0.4)] {
            for (a1, c1) in [(0usize, 0.5), (1, 0.1)] {
                b.push(&[0.0], a0, c0, &[1.0], 0, false).unwrap();
                b.push(&[1.0], a1, c1, &[1.0], 1, true).unwrap();
                b.end_episode(false);
            }
        }
        let d = b.finish().unwrap();
        let class = TabularClass { n_states: 2, n_actions: 2 };
        let run = fqi_finite_horizon(&d, 2, &class, &FqiConfig::new(LossKind::Log, 1, 1.0)).unwrap();
        let f1 = run.models[1].values();
        assert_eq!((f1.get(1, 0), f1.get(1, 1)), (0.5, 0.1));
        let f0 = run.models[0].values();
        assert!((f0.get(0, 0) - 0.3).abs() < 1e-15);
        assert!((f0.get(0, 1) - 0.5).abs() < 1e-15);
        let pi = run.policy();
        let mut rng = child_rng(0, 0);
        assert_eq!(pi.act(&[0.0], 0, &mut rng).unwrap(), 0);
        assert_eq!(pi.act(&[1.0], 1, &mut rng).unwrap(), 1);

        let h1 = fqi_finite_horizon(&d.take_prefix(1).unwrap(), 1, &class, &FqiConfig::new(LossKind::Log, 1, 1.0));
        assert!(matches!(h1, Err(Error::Data(_))));
    }

    #[test]
    fn zero_cost_data_fits_zero_targets() {
        let basis = FourierBasis::new(BoxBounds::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap(), 2).unwrap();
        let class = SigmoidLinearClass { basis, n_actions: 3 };
        let mut b = DatasetBuilder::new(2, Manifest::synthetic("plane", 3));
        let mut rng = child_rng(2, 2);
        for _ in 0..20 {
            for h in 0..3 {
                let s = [rng.random::<f64>(), rng.random::<f64>()];
                b.push(&s, rng.random_range(0..3), 0.0, &s, h, h == 2).unwrap();
            }
            b.end_episode(false);
        }
        let d = b.finish().unwrap();
        let run = fqi_finite_horizon(&d, 3, &class, &FqiConfig::new(LossKind::Log, 1, 1.0)).unwrap();
        for m in &run.models {
            let mean = d.iter().map(|t| m.predict(t.state, t.action).unwrap().get()).sum::<f64>() / d.len() as f64;
            assert!(mean < 1e-3, "{mean}");
        }
        assert!(run.reports.iter().all(|r| r.n_samples == 20 && r.loss_value < 1e-3));
    }

    #[test]
    fn sigmoid_runs_are_reproducible() {
        let basis = FourierBasis::new(BoxBounds::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap(), 4).unwrap();
        let class = SigmoidLinearClass { basis, n_actions: 3 };
        let mut b = DatasetBuilder::new(2, Manifest::synthetic("plane", 1));
        let mut rng = child_rng(3, 3);
        for _ in 0..200 {
            let s = [rng.random::<f64>(), rng.random::<f64>()];
            let s2 = [rng.random::<f64>(), rng.random::<f64>()];
            let c = if s[0] > 0.8 { 0.05 } else { 0.0 };
            b.push(&s, rng.random_range(0..3), c, &s2, 0, rng.random_bool(0.1)).unwrap();
            b.end_episode(false);
        }
        let d = b.finish().unwrap();
        for loss in LossKind::ALL {
            let cfg = FqiConfig { init: Init::Seeded(4), ..FqiConfig::new(loss, 4, 0.9) };
            let a = fqi_stationary(&d, &class, &cfg).unwrap();
            let b = fqi_stationary(&d, &class, &cfg).unwrap();
            assert_eq!(a.models, b.models);
            assert_eq!(a.models.len(), 4);
            assert!(a.models.iter().all(|m| m.params().iter().all(|p| p.is_finite())));
        }
    }

    #[test]
    fn config_validation() {
        let mdp = random_mdp(1, 2, 1, 0.5).unwrap();
        let d = tabular_data(&mdp, 1, 0);
        let class = TabularClass { n_states: 2, n_actions: 1 };
        assert!(fqi_stationary(&d, &class, &FqiConfig::new(LossKind::Log, 0, 0.5)).is_err());
        assert!(fqi_stationary(&d, &class, &FqiConfig::new(LossKind::Log, 3, 1.0)).is_err());
        assert!(fqi_finite_horizon(&d, 1, &class, &FqiConfig::new(LossKind::Log, 1, 1.0)).is_ok());
        assert!(fqi_finite_horizon(&d, 0, &class, &FqiConfig::new(LossKind::Log, 1, 1.0)).is_err());
    }
}
