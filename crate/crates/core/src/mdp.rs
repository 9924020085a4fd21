//! Exact dynamic programming on finite MDPs.
//!
//! Costs are normalized pointwise, `0 <= c(s,a) <= 1 - gamma`, which keeps
//! every discounted trajectory cost (and therefore `q*`) inside `[0, 1]`.

use std::fmt::Write as _;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{flat_dirichlet, rng_from_seed};

const ROW_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    /// `P(s'|s,a)` at `(s * A + a) * S + s'`.
    transition: Vec<f64>,
    /// `c(s,a)` at `s * A + a`.
    cost: Vec<f64>,
    discount: f64,
}

/// Action values (or any function on state-action pairs), row-major by state.
#[derive(Clone, Debug, PartialEq)]
pub struct QTable {
    n_states: usize,
    n_actions: usize,
    values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateDist {
    probs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateActionDist {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

/// Stationary Markov policy, `probs[s * A + a] = pi(a|s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularPolicy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

fn check_distribution(probs: &[f64], what: &str) -> Result<()> {
    if probs.iter().any(|&p| !(p >= 0.0)) {
        return Err(Error::domain(format!("{what} has a negative or NaN entry")));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > ROW_TOL * (probs.len().max(1) as f64) {
        return Err(Error::domain(format!("{what} sums to {total}, not 1")));
    }
    Ok(())
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        cost: Vec<f64>,
        discount: f64,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::domain("an MDP needs at least one state and one action"));
        }
        if !(0.0..1.0).contains(&discount) {
            return Err(Error::domain(format!("discount {discount} is not in [0, 1)")));
        }
        if transition.len() != n_states * n_actions * n_states {
            return Err(Error::shape(format!(
                "transition has {} entries, expected {}",
                transition.len(),
                n_states * n_actions * n_states
            )));
        }
        if cost.len() != n_states * n_actions {
            return Err(Error::shape(format!(
                "cost has {} entries, expected {}",
                cost.len(),
                n_states * n_actions
            )));
        }
        for (i, row) in transition.chunks(n_states).enumerate() {
            check_distribution(row, &format!("transition row {i}"))?;
        }
        let cap = 1.0 - discount;
        if let Some(c) = cost.iter().find(|&&c| !(0.0..=cap + 1e-15).contains(&c)) {
            return Err(Error::domain(format!("cost {c} violates 0 <= c <= 1 - gamma = {cap}")));
        }
        Ok(TabularMdp { n_states, n_actions, transition, cost, discount })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn cost(&self, s: usize, a: usize) -> f64 {
        self.cost[s * self.n_actions + a]
    }

    pub fn costs(&self) -> &[f64] {
        &self.cost
    }

    /// Next-state distribution `P(.|s,a)`.
    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    /// Same dynamics with every cost multiplied by `factor` in `[0, 1]`.
    pub fn with_cost_scale(&self, factor: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&factor) {
            return Err(Error::domain(format!("cost scale {factor} is not in [0, 1]")));
        }
        let mut out = self.clone();
        out.cost.iter_mut().for_each(|c| *c *= factor);
        Ok(out)
    }

    fn check_q(&self, f: &QTable) -> Result<()> {
        if f.n_states != self.n_states || f.n_actions != self.n_actions {
            return Err(Error::shape(format!(
                "table is {}x{}, MDP is {}x{}",
                f.n_states, f.n_actions, self.n_states, self.n_actions
            )));
        }
        Ok(())
    }

    fn check_policy(&self, pi: &TabularPolicy) -> Result<()> {
        if pi.n_states != self.n_states || pi.n_actions != self.n_actions {
            return Err(Error::shape("policy shape does not match the MDP"));
        }
        Ok(())
    }

    fn check_state_dist(&self, eta: &StateDist) -> Result<()> {
        if eta.probs.len() != self.n_states {
            return Err(Error::shape("state distribution length does not match the MDP"));
        }
        Ok(())
    }

    /// `c + gamma * P v` for a state function `v`.
    fn backup(&self, v: &[f64]) -> QTable {
        let values = (0..self.n_states * self.n_actions)
            .map(|sa| {
                let row = &self.transition[sa * self.n_states..(sa + 1) * self.n_states];
                let ev: f64 = row.iter().zip(v).map(|(p, x)| p * x).sum();
                self.cost[sa] + self.discount * ev
            })
            .collect();
        QTable { n_states: self.n_states, n_actions: self.n_actions, values }
    }

    /// Bellman optimality operator `(Tf)(s,a) = c(s,a) + gamma sum_s' P(s'|s,a) min_a' f(s',a')`.
    pub fn bellman_apply(&self, f: &QTable) -> Result<QTable> {
        self.check_q(f)?;
        Ok(self.backup(&f.min_over_actions()))
    }

    /// Policy evaluation operator `c + gamma P f(., pi)`.
    pub fn policy_apply(&self, pi: &TabularPolicy, f: &QTable) -> Result<QTable> {
        self.check_q(f)?;
        self.check_policy(pi)?;
        Ok(self.backup(&f.under_policy(pi)))
    }

    /// Stop once a step moves less than `tol (1 - gamma) / gamma`, which
    /// certifies a sup-norm error of at most `tol`.
    fn iterate_to_fixed_point(&self, tol: f64, mut step: impl FnMut(&QTable) -> QTable) -> QTable {
        let mut q = QTable::zeros(self.n_states, self.n_actions);
        if self.discount == 0.0 {
            return step(&q);
        }
        let threshold = tol * (1.0 - self.discount) / self.discount;
        loop {
            let next = step(&q);
            let delta = next.sup_distance(&q);
            q = next;
            if delta <= threshold {
                return q;
            }
        }
    }

    /// Value iteration from zero; the result is within `tol` of `q*` in sup norm.
    pub fn optimal_q(&self, tol: f64) -> Result<QTable> {
        if !(tol > 0.0) {
            return Err(Error::domain("tolerance must be positive"));
        }
        Ok(self.iterate_to_fixed_point(tol, |q| self.backup(&q.min_over_actions())))
    }

    pub fn policy_q(&self, pi: &TabularPolicy, tol: f64) -> Result<QTable> {
        self.check_policy(pi)?;
        if !(tol > 0.0) {
            return Err(Error::domain("tolerance must be positive"));
        }
        Ok(self.iterate_to_fixed_point(tol, |q| self.backup(&q.under_policy(pi))))
    }

    /// `q^pi` by solving `(I - gamma P_pi) v = c_pi` directly.
    pub fn solve_policy_q(&self, pi: &TabularPolicy) -> Result<QTable> {
        self.check_policy(pi)?;
        let ns = self.n_states;
        let mut system = vec![0.0; ns * ns];
        let mut rhs = vec![0.0; ns];
        for s in 0..ns {
            system[s * ns + s] = 1.0;
            for (a, &w) in pi.row(s).iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                rhs[s] += w * self.cost(s, a);
                for (s2, p) in self.row(s, a).iter().enumerate() {
                    system[s * ns + s2] -= self.discount * w * p;
                }
            }
        }
        let v = solve_dense(system, rhs, ns)?;
        Ok(self.backup(&v))
    }

    /// `q*` by policy iteration with exact evaluation; accurate to rounding.
    pub fn solve_optimal_q(&self) -> Result<QTable> {
        let mut actions: Vec<usize> = (0..self.n_states)
            .map(|s| argmin(&self.cost[s * self.n_actions..(s + 1) * self.n_actions]))
            .collect();
        // Each improvement strictly decreases the value, so this terminates.
        for _ in 0..10_000 {
            let pi = TabularPolicy::deterministic(&actions, self.n_actions)?;
            let q = self.solve_policy_q(&pi)?;
            let mut changed = false;
            for (s, current) in actions.iter_mut().enumerate() {
                let row = q.row(s);
                let best = argmin(row);
                if row[best] < row[*current] - 1e-15 * (1.0 + row[*current].abs()) {
                    *current = best;
                    changed = true;
                }
            }
            if !changed {
                return Ok(q);
            }
        }
        Err(Error::Run("policy iteration did not stabilize".into()))
    }

    /// `nu P`: distribution of the next state when `(S, A) ~ nu`.
    pub fn propagate(&self, nu: &StateActionDist) -> Result<StateDist> {
        if nu.n_states != self.n_states || nu.n_actions != self.n_actions {
            return Err(Error::shape("state-action distribution shape does not match the MDP"));
        }
        let mut out = vec![0.0; self.n_states];
        for (sa, &w) in nu.probs.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let row = &self.transition[sa * self.n_states..(sa + 1) * self.n_states];
            out.iter_mut().zip(row).for_each(|(o, p)| *o += w * p);
        }
        Ok(StateDist { probs: out })
    }

    /// State distribution at step `h` (1-based) when following `pi` from `eta1`.
    pub fn occupancy(&self, eta1: &StateDist, pi: &TabularPolicy, h: usize) -> Result<StateDist> {
        if h == 0 {
            return Err(Error::domain("steps are numbered from 1"));
        }
        self.check_state_dist(eta1)?;
        self.check_policy(pi)?;
        let mut eta = eta1.clone();
        for _ in 1..h {
            eta = self.propagate(&eta.times_policy(pi)?)?;
        }
        Ok(eta)
    }

    /// Occupancies `eta_1, ..., eta_horizon` under a stationary policy.
    pub fn occupancies(&self, eta1: &StateDist, pi: &TabularPolicy, horizon: usize) -> Result<Vec<StateDist>> {
        self.check_state_dist(eta1)?;
        self.check_policy(pi)?;
        let mut out = Vec::with_capacity(horizon);
        let mut eta = eta1.clone();
        for h in 0..horizon {
            if h > 0 {
                eta = self.propagate(&eta.times_policy(pi)?)?;
            }
            out.push(eta.clone());
        }
        Ok(out)
    }

    /// Joint distribution of `(S_h, A_h)` under the nonstationary policy
    /// `policies[0], ..., policies[h-1]` where `h = policies.len()`.
    pub fn nonstationary_occupancy(&self, eta1: &StateDist, policies: &[TabularPolicy]) -> Result<StateActionDist> {
        let (last, earlier) = policies
            .split_last()
            .ok_or_else(|| Error::domain("need at least one policy"))?;
        self.check_state_dist(eta1)?;
        let mut eta = eta1.clone();
        for pi in earlier {
            self.check_policy(pi)?;
            eta = self.propagate(&eta.times_policy(pi)?)?;
        }
        self.check_policy(last)?;
        eta.times_policy(last)
    }

    /// `rho[h-1][s] = max over nonstationary policies of P(S_h = s)` for `h = 1..=horizon`.
    ///
    /// For a fixed target the best `j`-steps-to-go arrival probability does not
    /// depend on the absolute time, so one backward recursion per target state
    /// yields every horizon at once.
    pub fn max_arrival_probs(&self, eta1: &StateDist, horizon: usize) -> Result<Vec<Vec<f64>>> {
        self.check_state_dist(eta1)?;
        let (ns, na) = (self.n_states, self.n_actions);
        let mut rho = vec![vec![0.0; ns]; horizon];
        for target in 0..ns {
            let mut w: Vec<f64> = (0..ns).map(|x| if x == target { 1.0 } else { 0.0 }).collect();
            for rho_h in rho.iter_mut() {
                rho_h[target] = eta1.probs.iter().zip(&w).map(|(e, x)| e * x).sum();
                w = (0..ns)
                    .map(|x| {
                        (0..na)
                            .map(|a| self.row(x, a).iter().zip(&w).map(|(p, v)| p * v).sum::<f64>())
                            .fold(0.0, f64::max)
                    })
                    .collect();
            }
        }
        Ok(rho)
    }

    /// Largest density ratio of an admissible distribution at steps `1..=horizon` against `mu`.
    /// Returns `+inf` when an admissible distribution charges a pair `mu` misses.
    pub fn concentrability(&self, eta1: &StateDist, mu: &StateActionDist, horizon: usize) -> Result<f64> {
        if horizon == 0 {
            return Err(Error::domain("horizon must be at least 1"));
        }
        if mu.n_states != self.n_states || mu.n_actions != self.n_actions {
            return Err(Error::shape("mu shape does not match the MDP"));
        }
        let rho = self.max_arrival_probs(eta1, horizon)?;
        let mut worst: f64 = 0.0;
        for rho_h in &rho {
            for (s, &r) in rho_h.iter().enumerate() {
                if r <= 0.0 {
                    continue;
                }
                for a in 0..self.n_actions {
                    let m = mu.get(s, a);
                    if m <= 0.0 {
                        return Ok(f64::INFINITY);
                    }
                    worst = worst.max(r / m);
                }
            }
        }
        Ok(worst)
    }

    /// Human-readable dump used for test fixtures.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "states={} actions={} gamma={}", self.n_states, self.n_actions, self.discount);
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let row: Vec<String> = self.row(s, a).iter().map(|p| format!("{p}")).collect();
                let _ = writeln!(out, "s={s} a={a} c={} P=[{}]", self.cost(s, a), row.join(", "));
            }
        }
        out
    }
}

/// Random MDP: flat-Dirichlet transition rows and costs uniform on `[0, 1 - gamma]`.
pub fn random_mdp(seed: u64, n_states: usize, n_actions: usize, gamma: f64) -> Result<TabularMdp> {
    let mut rng = rng_from_seed(seed);
    let mut transition = Vec::with_capacity(n_states * n_actions * n_states);
    for _ in 0..n_states * n_actions {
        transition.extend(flat_dirichlet(&mut rng, n_states));
    }
    let cost = (0..n_states * n_actions)
        .map(|_| rng.random::<f64>() * (1.0 - gamma))
        .collect();
    TabularMdp::new(n_states, n_actions, transition, cost, gamma)
}

/// Deterministic greedy policy; ties go to the smallest action index.
pub fn greedy_policy_of(f: &QTable) -> TabularPolicy {
    let actions: Vec<usize> = (0..f.n_states).map(|s| argmin(f.row(s))).collect();
    TabularPolicy::deterministic(&actions, f.n_actions).expect("argmin is always a valid action")
}

/// Gaussian elimination with partial pivoting on a dense row-major system.
fn solve_dense(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Result<Vec<f64>> {
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .unwrap_or(col);
        if a[pivot * n + col].abs() < 1e-300 {
            return Err(Error::Run("singular policy-evaluation system".into()));
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
        }
        let d = a[col * n + col];
        for row in col + 1..n {
            let factor = a[row * n + col] / d;
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[row * n + k] -= factor * a[col * n + k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|k| a[row * n + k] * x[k]).sum();
        x[row] = (b[row] - tail) / a[row * n + row];
    }
    Ok(x)
}

pub(crate) fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] {
            best = i;
        }
    }
    best
}

pub fn value_of(eta: &StateDist, v: &[f64]) -> Result<f64> {
    if eta.probs.len() != v.len() {
        return Err(Error::shape(format!("distribution has {} states, values {}", eta.probs.len(), v.len())));
    }
    Ok(eta.probs.iter().zip(v).map(|(p, x)| p * x).sum())
}

/// `(sum_i w_i |x_i|^p)^(1/p)`.
pub fn weighted_norm(values: &[f64], weights: &[f64], p: f64) -> f64 {
    debug_assert_eq!(values.len(), weights.len());
    let s: f64 = values.iter().zip(weights).map(|(x, w)| w * x.abs().powf(p)).sum();
    s.powf(1.0 / p)
}

impl QTable {
    pub fn new(n_states: usize, n_actions: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_states * n_actions {
            return Err(Error::shape(format!("{} values for a {n_states}x{n_actions} table", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("table entries must be finite"));
        }
        Ok(QTable { n_states, n_actions, values })
    }

    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        QTable { n_states, n_actions, values: vec![0.0; n_states * n_actions] }
    }

    pub fn filled(n_states: usize, n_actions: usize, value: f64) -> Self {
        QTable { n_states, n_actions, values: vec![value; n_states * n_actions] }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn set(&mut self, s: usize, a: usize, v: f64) {
        self.values[s * self.n_actions + a] = v;
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `f^(s) = min_a f(s, a)`.
    pub fn min_over_actions(&self) -> Vec<f64> {
        (0..self.n_states)
            .map(|s| self.row(s).iter().copied().fold(f64::INFINITY, f64::min))
            .collect()
    }

    /// `f(s, pi) = sum_a pi(a|s) f(s, a)`.
    pub fn under_policy(&self, pi: &TabularPolicy) -> Vec<f64> {
        (0..self.n_states)
            .map(|s| self.row(s).iter().zip(pi.row(s)).map(|(q, p)| q * p).sum())
            .collect()
    }

    pub fn sup_distance(&self, other: &QTable) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn map(&self, mut op: impl FnMut(f64) -> f64) -> QTable {
        QTable {
            n_states: self.n_states,
            n_actions: self.n_actions,
            values: self.values.iter().map(|&v| op(v)).collect(),
        }
    }
}

impl StateDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        check_distribution(&probs, "state distribution")?;
        Ok(StateDist { probs })
    }

    pub fn point(n_states: usize, s: usize) -> Self {
        let mut probs = vec![0.0; n_states];
        probs[s] = 1.0;
        StateDist { probs }
    }

    pub fn uniform(n_states: usize) -> Self {
        StateDist { probs: vec![1.0 / n_states as f64; n_states] }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// `eta x pi`: draw `S ~ eta`, then `A ~ pi(S)`.
    pub fn times_policy(&self, pi: &TabularPolicy) -> Result<StateActionDist> {
        if pi.n_states != self.probs.len() {
            return Err(Error::shape("policy and distribution disagree on the number of states"));
        }
        let probs = (0..pi.n_states)
            .flat_map(|s| pi.row(s).iter().map(move |p| p * self.probs[s]))
            .collect();
        Ok(StateActionDist { n_states: pi.n_states, n_actions: pi.n_actions, probs })
    }
}

impl StateActionDist {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(Error::shape("state-action distribution has the wrong length"));
        }
        check_distribution(&probs, "state-action distribution")?;
        Ok(StateActionDist { n_states, n_actions, probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        let n = n_states * n_actions;
        StateActionDist { n_states, n_actions, probs: vec![1.0 / n as f64; n] }
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

impl TabularPolicy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(Error::shape("policy table has the wrong length"));
        }
        for (s, row) in probs.chunks(n_actions).enumerate() {
            check_distribution(row, &format!("policy row {s}"))?;
        }
        Ok(TabularPolicy { n_states, n_actions, probs })
    }

    pub fn deterministic(actions: &[usize], n_actions: usize) -> Result<Self> {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(Error::domain(format!("action {a} out of range")));
            }
            probs[s * n_actions + a] = 1.0;
        }
        Ok(TabularPolicy { n_states: actions.len(), n_actions, probs })
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    /// The action of a deterministic policy (the most likely action otherwise).
    pub fn action(&self, s: usize) -> usize {
        let row = self.row(s);
        let mut best = 0;
        for (a, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = a;
            }
        }
        best
    }
}
