//! `[0,1]`-valued action-value models and the regression objectives used to fit them.
//!
//! Two classes are provided: a sigmoid of a per-action linear function of
//! Fourier features, fitted by BFGS, and the full tabular class, whose
//! empirical risk minimizer under either loss is the per-cell mean.
//!
//! States of tabular models are one-coordinate vectors holding the state index.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::bfgs::{bfgs_minimize, BfgsOptions, BfgsResult};
use crate::error::{Error, Result};
use crate::features::FourierBasis;
use crate::loss::{LossKind, Prob};
use crate::mdp::{argmin, QTable};

pub trait QModel {
    fn n_actions(&self) -> usize;

    fn predict(&self, state: &[f64], action: usize) -> Result<Prob>;

    /// All action values at `state`.
    fn q_values(&self, state: &[f64]) -> Result<Vec<f64>> {
        (0..self.n_actions()).map(|a| self.predict(state, a).map(Prob::get)).collect()
    }

    /// `argmin_a f(state, a)`, ties to the smallest index.
    fn greedy_action(&self, state: &[f64]) -> Result<usize> {
        Ok(argmin(&self.q_values(state)?))
    }
}

pub fn model_predict(model: &impl QModel, state: &[f64], action: usize) -> Result<Prob> {
    model.predict(state, action)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn check_action(action: usize, n_actions: usize) -> Result<()> {
    if action < n_actions {
        Ok(())
    } else {
        Err(Error::domain(format!("action {action} out of range for {n_actions} actions")))
    }
}

/// `f(s, a) = sigmoid(<phi(s), theta_a>)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmoidLinearModel {
    basis: FourierBasis,
    n_actions: usize,
    /// `theta_0, theta_1, ...` concatenated.
    params: Vec<f64>,
}

impl SigmoidLinearModel {
    pub fn new(basis: FourierBasis, n_actions: usize, params: Vec<f64>) -> Result<Self> {
        if n_actions == 0 {
            return Err(Error::config("a model needs at least one action"));
        }
        let want = n_actions * basis.n_features();
        if params.len() != want {
            return Err(Error::shape(format!("{} parameters given, model has {want}", params.len())));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::domain("parameters must be finite"));
        }
        Ok(SigmoidLinearModel { basis, n_actions, params })
    }

    pub fn zeros(basis: FourierBasis, n_actions: usize) -> Result<Self> {
        let n = n_actions * basis.n_features();
        Self::new(basis, n_actions, vec![0.0; n])
    }

    pub fn basis(&self) -> &FourierBasis {
        &self.basis
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        Self::new(self.basis.clone(), self.n_actions, params)
    }

    fn block(&self, action: usize) -> &[f64] {
        let m = self.basis.n_features();
        &self.params[action * m..(action + 1) * m]
    }

    /// The logit `<phi, theta_a>` for precomputed features.
    pub fn logit_from_features(&self, phi: &[f64], action: usize) -> f64 {
        dot(phi, self.block(action))
    }

    /// Action values for precomputed features, written into `out`.
    pub fn q_values_from_features(&self, phi: &[f64], out: &mut [f64]) {
        for (a, o) in out.iter_mut().enumerate().take(self.n_actions) {
            *o = sigmoid(self.logit_from_features(phi, a));
        }
    }

    /// Gradient of the prediction with respect to all parameters.
    pub fn gradient(&self, state: &[f64], action: usize) -> Result<Vec<f64>> {
        check_action(action, self.n_actions)?;
        let phi = self.basis.features(state)?;
        let p = sigmoid(self.logit_from_features(&phi, action));
        let m = phi.len();
        let mut g = vec![0.0; self.params.len()];
        for (gj, fj) in g[action * m..(action + 1) * m].iter_mut().zip(&phi) {
            *gj = p * (1.0 - p) * fj;
        }
        Ok(g)
    }
}

impl QModel for SigmoidLinearModel {
    fn n_actions(&self) -> usize {
        self.n_actions
    }

    fn predict(&self, state: &[f64], action: usize) -> Result<Prob> {
        check_action(action, self.n_actions)?;
        let phi = self.basis.features(state)?;
        Ok(Prob::saturating(sigmoid(self.logit_from_features(&phi, action))))
    }

    fn q_values(&self, state: &[f64]) -> Result<Vec<f64>> {
        let phi = self.basis.features(state)?;
        let mut out = vec![0.0; self.n_actions];
        self.q_values_from_features(&phi, &mut out);
        Ok(out)
    }

    /// Compares logits, which orders actions exactly like the sigmoid values
    /// without the ties that saturation would create.
    fn greedy_action(&self, state: &[f64]) -> Result<usize> {
        let phi = self.basis.features(state)?;
        let logits: Vec<f64> = (0..self.n_actions).map(|a| self.logit_from_features(&phi, a)).collect();
        Ok(argmin(&logits))
    }
}

pub fn model_gradient(model: &SigmoidLinearModel, state: &[f64], action: usize) -> Result<Vec<f64>> {
    model.gradient(state, action)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Featurized regression inputs with their targets.
#[derive(Clone, Debug)]
pub struct RegressionBatch<'a> {
    n_features: usize,
    n_actions: usize,
    /// Row-major `len x n_features`.
    features: Cow<'a, [f64]>,
    actions: Cow<'a, [usize]>,
    targets: Vec<f64>,
}

impl<'a> RegressionBatch<'a> {
    /// Featurizes `states` (row-major, `basis.dim()` coordinates each).
    pub fn new(basis: &FourierBasis, n_actions: usize, states: &[f64], actions: &[usize], targets: Vec<f64>) -> Result<Self> {
        let d = basis.dim();
        let m = basis.n_features();
        if states.len() != actions.len() * d || actions.len() != targets.len() {
            return Err(Error::shape(format!(
                "{} state coordinates, {} actions and {} targets do not line up",
                states.len(),
                actions.len(),
                targets.len()
            )));
        }
        let mut features = vec![0.0; actions.len() * m];
        for (row, s) in features.chunks_exact_mut(m).zip(states.chunks_exact(d)) {
            basis.features_into(s, row)?;
        }
        Self::from_features(m, n_actions, features.into(), actions.to_vec().into(), targets)
    }

    pub fn from_features(
        n_features: usize,
        n_actions: usize,
        features: Cow<'a, [f64]>,
        actions: Cow<'a, [usize]>,
        targets: Vec<f64>,
    ) -> Result<Self> {
        if features.len() != actions.len() * n_features || actions.len() != targets.len() {
            return Err(Error::shape("features, actions and targets do not line up"));
        }
        if let Some(&a) = actions.iter().find(|&&a| a >= n_actions) {
            return Err(Error::domain(format!("action {a} out of range for {n_actions} actions")));
        }
        if let Some(t) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::domain(format!("target {t} is not in [0, 1]")));
        }
        Ok(RegressionBatch { n_features, n_actions, features, actions, targets })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn n_params(&self) -> usize {
        self.n_features * self.n_actions
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    /// Mean loss at `params`; the gradient is written into `grad`.
    pub fn objective_into(&self, params: &[f64], loss: LossKind, grad: &mut [f64]) -> f64 {
        let m = self.n_features;
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut total = 0.0;
        for ((phi, &a), &t) in self.features.chunks_exact(m).zip(self.actions.iter()).zip(&self.targets) {
            let block = a * m..(a + 1) * m;
            let z = dot(phi, &params[block.clone()]);
            let p = sigmoid(z);
            // derivative of the per-sample loss with respect to the logit
            let dz = match loss {
                LossKind::Log => {
                    total += t * softplus(-z) + (1.0 - t) * softplus(z);
                    p - t
                }
                LossKind::Squared => {
                    total += (p - t) * (p - t);
                    2.0 * (p - t) * p * (1.0 - p)
                }
            };
            for (g, f) in grad[block].iter_mut().zip(phi) {
                *g += dz * f;
            }
        }
        let n = self.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        total / n
    }

    /// Minimizes the mean loss by BFGS from `start`.
    pub fn fit(&self, start: &[f64], loss: LossKind, opts: &BfgsOptions) -> Result<BfgsResult> {
        if self.is_empty() {
            return Err(Error::data("cannot fit an empty regression batch"));
        }
        bfgs_minimize(|x, g| self.objective_into(x, loss, g), start, opts)
    }
}

/// Mean loss of the sigmoid-linear model with parameters `params` on `batch`, and its gradient.
pub fn empirical_objective(batch: &RegressionBatch<'_>, params: &[f64], loss: LossKind) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::data("empty regression batch"));
    }
    if params.len() != batch.n_params() {
        return Err(Error::shape(format!("{} parameters given, batch needs {}", params.len(), batch.n_params())));
    }
    let mut grad = vec![0.0; params.len()];
    let value = batch.objective_into(params, loss, &mut grad);
    Ok((value, grad))
}

/// Lookup-table model on a finite state space.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularQModel {
    values: QTable,
}

impl TabularQModel {
    pub fn new(values: QTable) -> Result<Self> {
        if values.values().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::domain("tabular model values must lie in [0, 1]"));
        }
        Ok(TabularQModel { values })
    }

    pub fn filled(n_states: usize, n_actions: usize, value: f64) -> Result<Self> {
        Self::new(QTable::filled(n_states, n_actions, value))
    }

    pub fn values(&self) -> &QTable {
        &self.values
    }

    pub fn state_index(&self, state: &[f64]) -> Result<usize> {
        state_index(state, self.values.n_states())
    }
}

pub(crate) fn state_index(state: &[f64], n_states: usize) -> Result<usize> {
    match state {
        [s] if *s >= 0.0 && s.fract() == 0.0 && (*s as usize) < n_states => Ok(*s as usize),
        _ => Err(Error::domain(format!("{state:?} is not a state index below {n_states}"))),
    }
}

impl QModel for TabularQModel {
    fn n_actions(&self) -> usize {
        self.values.n_actions()
    }

    fn predict(&self, state: &[f64], action: usize) -> Result<Prob> {
        check_action(action, self.n_actions())?;
        Ok(Prob::saturating(self.values.get(self.state_index(state)?, action)))
    }

    fn q_values(&self, state: &[f64]) -> Result<Vec<f64>> {
        Ok(self.values.row(self.state_index(state)?).to_vec())
    }
}

/// Empirical risk minimizer over all of `[0,1]^{S x A}`.
///
/// Both losses are minimized in each cell by the mean of that cell's targets,
/// so `loss` does not change the result. Cells without data get 1.
pub fn tabular_fit(
    n_states: usize,
    n_actions: usize,
    states: &[usize],
    actions: &[usize],
    targets: &[f64],
    _loss: LossKind,
) -> Result<TabularQModel> {
    if states.len() != actions.len() || actions.len() != targets.len() {
        return Err(Error::shape("states, actions and targets must have equal lengths"));
    }
    let mut sums = vec![0.0; n_states * n_actions];
    let mut counts = vec![0usize; n_states * n_actions];
    for ((&s, &a), &t) in states.iter().zip(actions).zip(targets) {
        if s >= n_states || a >= n_actions {
            return Err(Error::domain(format!("cell ({s}, {a}) outside {n_states} x {n_actions}")));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::domain(format!("target {t} is not in [0, 1]")));
        }
        sums[s * n_actions + a] += t;
        counts[s * n_actions + a] += 1;
    }
    let values = sums
        .iter()
        .zip(&counts)
        .map(|(&sum, &c)| if c == 0 { 1.0 } else { (sum / c as f64).clamp(0.0, 1.0) })
        .collect();
    TabularQModel::new(QTable::new(n_states, n_actions, values)?)
}
