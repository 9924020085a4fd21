//! Randomized numerical checks of the inequality chain behind the small-cost
//! bound for log-loss fitted Q-iteration.
//!
//! Every check draws independent instances from a seeded stream, evaluates
//! both sides of one inequality exactly (finite MDPs, exact `q*` by policy
//! iteration with linear solves) and records the largest `lhs - rhs`. A
//! report passes when that worst violation stays below its tolerance.
//!
//! Suites:
//! - pointwise: scalar Hellinger/triangular chain and its integrated form,
//!   the square-root shift nonexpansion, and the min-operator nonexpansion;
//! - norms: the multiplicative Cauchy-Schwarz bound, the `xi_f` bound,
//!   change of measure under concentrability, and the square-root-of-mean
//!   nonexpansion;
//! - contraction: Hellinger contraction of the Bellman operator, the
//!   pseudo-contraction at `q*`, and error propagation across iterations;
//! - decomposition: performance difference, per-step regret decomposition,
//!   the first-order decomposition, the greedy-policy error bound with its
//!   explicit constants, and the tail-value inequality;
//! - concentration: Monte-Carlo coverage of the log-loss ERM deviation bound
//!   on a finite class and its `1/n` rate.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{hellinger_sq, triangular_dev_unchecked, Prob};
use crate::mdp::{
    argmin, greedy_policy_of, random_mdp, value_of, weighted_norm, QTable, StateActionDist, StateDist,
    TabularMdp, TabularPolicy,
};
use crate::rng::{child_rng, derive_seed, flat_dirichlet, Rng};

pub const POINTWISE_TOL: f64 = 1e-10;
pub const NORM_TOL: f64 = 1e-10;
pub const CONTRACTION_TOL: f64 = 1e-9;
pub const DECOMPOSITION_TOL: f64 = 1e-8;

/// Outcome of one inequality over many random instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub lemma_id: String,
    pub n_instances: usize,
    /// Largest `lhs - rhs` observed; nonpositive when the inequality always held.
    pub worst_violation: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub seed: u64,
}

impl TheoryReport {
    fn new(lemma_id: &str, n_instances: usize, worst_violation: f64, tolerance: f64, seed: u64) -> Self {
        TheoryReport {
            lemma_id: lemma_id.to_string(),
            n_instances,
            worst_violation,
            tolerance,
            pass: worst_violation <= tolerance,
            seed,
        }
    }
}

/// Running maximum of violations for one lemma.
struct Worst {
    id: &'static str,
    tol: f64,
    value: f64,
}

impl Worst {
    fn new(id: &'static str, tol: f64) -> Self {
        Worst { id, tol, value: f64::NEG_INFINITY }
    }

    fn record(&mut self, lhs: f64, rhs: f64) {
        let v = lhs - rhs;
        // NaN must never pass silently
        self.value = if v.is_nan() { f64::INFINITY } else { self.value.max(v) };
    }

    fn finish(self, n: usize, seed: u64) -> TheoryReport {
        TheoryReport::new(self.id, n, self.value, self.tol, seed)
    }
}

/// Triangular deviation `Delta_f` and sum `xi_f` of `f` against `q*`.
#[derive(Clone, Debug, PartialEq)]
pub struct XiDelta {
    pub xi: Vec<f64>,
    pub delta: Vec<f64>,
    /// `D_f`: the largest of `||Delta_f||_{2, eta_h x pi}` and
    /// `||Delta_f||_{2, eta_h x pi*}` over the steps supplied.
    pub d_f: f64,
}

impl XiDelta {
    pub fn pointwise(f: &QTable, qstar: &QTable) -> (Vec<f64>, Vec<f64>) {
        let xi = f.values().iter().zip(qstar.values()).map(|(a, b)| a + b).collect();
        let delta = f
            .values()
            .iter()
            .zip(qstar.values())
            .map(|(&a, &b)| triangular_dev_unchecked(a, b))
            .collect();
        (xi, delta)
    }

    /// Builds `xi`, `delta` and `D_f` over the state occupancies `etas` of the greedy policy `pi`.
    pub fn compute(
        f: &QTable,
        qstar: &QTable,
        pi: &TabularPolicy,
        pi_star: &TabularPolicy,
        etas: &[StateDist],
    ) -> Result<Self> {
        let (xi, delta) = Self::pointwise(f, qstar);
        let mut d_f: f64 = 0.0;
        for eta in etas {
            for policy in [pi, pi_star] {
                let nu = eta.times_policy(policy)?;
                d_f = d_f.max(weighted_norm(&delta, nu.probs(), 2.0));
            }
        }
        Ok(XiDelta { xi, delta, d_f })
    }
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// `||sqrt(f) - sqrt(g)||_{2, w}`.
fn hellinger_norm(f: &[f64], g: &[f64], w: &[f64]) -> f64 {
    let s: f64 = f
        .iter()
        .zip(g)
        .zip(w)
        .map(|((a, b), w)| {
            let d = a.sqrt() - b.sqrt();
            w * d * d
        })
        .sum();
    s.sqrt()
}

/// `pi_{f,g}(s) = argmin_a min(f(s,a), g(s,a))`.
pub fn joint_greedy_policy(f: &QTable, g: &QTable) -> TabularPolicy {
    let actions: Vec<usize> = (0..f.n_states())
        .map(|s| {
            let joint: Vec<f64> = f.row(s).iter().zip(g.row(s)).map(|(a, b)| a.min(*b)).collect();
            argmin(&joint)
        })
        .collect();
    TabularPolicy::deterministic(&actions, f.n_actions()).expect("valid actions")
}

// ---------------------------------------------------------------------------
// random instance generators

/// A value spanning several orders of magnitude, occasionally exactly zero.
fn scaled_nonneg(rng: &mut Rng) -> f64 {
    match rng.random_range(0..10) {
        0 => 0.0,
        1 => rng.random::<f64>() * 1e-6,
        2..=4 => rng.random::<f64>(),
        5 => rng.random::<f64>() * 10.0,
        _ => rng.random::<f64>() * 10f64.powf(rng.random_range(-4.0..1.0)),
    }
}

fn random_prob_pair(rng: &mut Rng) -> (f64, f64) {
    let pick = |rng: &mut Rng| match rng.random_range(0..8) {
        0 => 0.0,
        1 => 1.0,
        2 => rng.random::<f64>() * 1e-4,
        _ => rng.random::<f64>(),
    };
    let p = pick(rng);
    let q = if rng.random_range(0..10) == 0 { p } else { pick(rng) };
    (p, q)
}

/// Sizes and discount for an MDP-level instance.
fn random_shape(rng: &mut Rng, gamma_max: f64) -> (usize, usize, f64) {
    let ns = rng.random_range(1..=6);
    let na = rng.random_range(1..=3);
    let gamma = rng.random_range(0.05..gamma_max);
    (ns, na, gamma)
}

/// Random MDP with some transitions removed (sparser dynamics) and, at
/// times, scaled-down costs so that `v*` is close to zero.
fn random_instance(rng: &mut Rng, gamma_max: f64) -> Result<TabularMdp> {
    let (ns, na, gamma) = random_shape(rng, gamma_max);
    let base = random_mdp(rng.random(), ns, na, gamma)?;
    let sparsity: f64 = if rng.random_bool(0.5) { rng.random_range(0.0..0.7) } else { 0.0 };
    let mut transition = Vec::with_capacity(ns * na * ns);
    for s in 0..ns {
        for a in 0..na {
            let mut row: Vec<f64> = base
                .row(s, a)
                .iter()
                .map(|&p| if rng.random::<f64>() < sparsity { 0.0 } else { p })
                .collect();
            let total: f64 = row.iter().sum();
            if total <= 0.0 {
                row = vec![0.0; ns];
                row[rng.random_range(0..ns)] = 1.0;
            } else {
                row.iter_mut().for_each(|p| *p /= total);
            }
            transition.extend(row);
        }
    }
    let scale = match rng.random_range(0..4) {
        0 => 10f64.powf(rng.random_range(-6.0..-1.0)),
        1 => 0.0f64.max(rng.random_range(-0.2..1.0)),
        _ => 1.0,
    };
    let cost = base.costs().iter().map(|c| c * scale).collect();
    TabularMdp::new(ns, na, transition, cost, gamma)
}

fn random_state_dist(rng: &mut Rng, ns: usize) -> StateDist {
    if rng.random_range(0..4) == 0 {
        StateDist::point(ns, rng.random_range(0..ns))
    } else {
        StateDist::new(flat_dirichlet(rng, ns)).expect("dirichlet sample")
    }
}

fn random_sa_dist(rng: &mut Rng, ns: usize, na: usize) -> StateActionDist {
    let mut p = flat_dirichlet(rng, ns * na);
    if rng.random_range(0..3) == 0 {
        // some nearly-empty cells
        for x in p.iter_mut() {
            if rng.random_range(0..3) == 0 {
                *x *= 1e-4;
            }
        }
        let t: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= t);
    }
    StateActionDist::new(ns, na, p).expect("normalized")
}

fn random_policy(rng: &mut Rng, ns: usize, na: usize) -> TabularPolicy {
    if rng.random_bool(0.5) {
        let actions: Vec<usize> = (0..ns).map(|_| rng.random_range(0..na)).collect();
        TabularPolicy::deterministic(&actions, na).expect("valid actions")
    } else {
        let probs = (0..ns).flat_map(|_| flat_dirichlet(rng, na)).collect();
        TabularPolicy::new(ns, na, probs).expect("row-stochastic")
    }
}

/// Random nonnegative table: uniform, heavy-tailed, or a perturbation of `anchor`.
fn random_table(rng: &mut Rng, ns: usize, na: usize, anchor: Option<&QTable>) -> QTable {
    let values: Vec<f64> = match (rng.random_range(0..4), anchor) {
        (0 | 1, Some(q)) => {
            let scale = 10f64.powf(rng.random_range(-5.0..0.0));
            q.values()
                .iter()
                .map(|&v| (v + scale * rng.random_range(-1.0..1.0)).max(0.0))
                .collect()
        }
        (2, _) => (0..ns * na).map(|_| scaled_nonneg(rng)).collect(),
        _ => (0..ns * na).map(|_| rng.random::<f64>()).collect(),
    };
    QTable::new(ns, na, values).expect("finite values")
}

/// An admissible state-action distribution: the exact `(S_h, A_h)` law of a
/// random nonstationary policy at a random step `h <= max_step`.
fn random_admissible(
    rng: &mut Rng,
    mdp: &TabularMdp,
    eta1: &StateDist,
    max_step: usize,
) -> Result<(StateActionDist, usize)> {
    let h = rng.random_range(1..=max_step);
    let policies: Vec<TabularPolicy> =
        (0..h).map(|_| random_policy(rng, mdp.n_states(), mdp.n_actions())).collect();
    Ok((mdp.nonstationary_occupancy(eta1, &policies)?, h))
}

// ---------------------------------------------------------------------------
// pointwise suite

/// Scalar Hellinger/triangular chain (and its integrated corollary), the
/// square-root shift nonexpansion and the min-operator nonexpansion.
pub fn verify_pointwise_inequalities(seed: u64, n_instances: usize) -> Vec<TheoryReport> {
    let mut chain = Worst::new("hellinger_triangular_chain", POINTWISE_TOL);
    let mut integrated = Worst::new("hellinger_triangular_integrated", POINTWISE_TOL);
    let mut shift = Worst::new("sqrt_shift_nonexpansion", POINTWISE_TOL);
    let mut min_op = Worst::new("min_operator_nonexpansion", POINTWISE_TOL);

    for i in 0..n_instances {
        let mut rng = child_rng(seed, i as u64);

        let (p, q) = random_prob_pair(&mut rng);
        let left = if p + q == 0.0 { 0.0 } else { 0.25 * (p - q).powi(2) / (p + q) };
        let mid = 0.5 * (p.sqrt() - q.sqrt()).powi(2);
        let right = hellinger_sq(Prob::saturating(p), Prob::saturating(q));
        chain.record(left, mid);
        chain.record(mid, right);

        let m = rng.random_range(1..=8);
        let w = flat_dirichlet(&mut rng, m);
        let pairs: Vec<(f64, f64)> = (0..m).map(|_| random_prob_pair(&mut rng)).collect();
        let tri: f64 = pairs
            .iter()
            .zip(&w)
            .map(|(&(a, b), w)| w * triangular_dev_unchecked(a, b).powi(2))
            .sum::<f64>()
            .sqrt();
        let hel: f64 = pairs
            .iter()
            .zip(&w)
            .map(|(&(a, b), w)| w * (a.sqrt() - b.sqrt()).powi(2))
            .sum::<f64>()
            .sqrt();
        let bern: f64 = pairs
            .iter()
            .zip(&w)
            .map(|(&(a, b), w)| w * hellinger_sq(Prob::saturating(a), Prob::saturating(b)))
            .sum();
        integrated.record(tri, std::f64::consts::SQRT_2 * hel);
        integrated.record(std::f64::consts::SQRT_2 * hel, 2.0 * bern.sqrt());

        let (x, a, b) = (scaled_nonneg(&mut rng), scaled_nonneg(&mut rng), scaled_nonneg(&mut rng));
        shift.record(((x + a).sqrt() - (x + b).sqrt()).abs(), (a.sqrt() - b.sqrt()).abs());

        let ns = rng.random_range(1..=6);
        let na = rng.random_range(1..=3);
        let f = random_table(&mut rng, ns, na, None);
        let g = if rng.random_range(0..10) == 0 { f.clone() } else { random_table(&mut rng, ns, na, Some(&f)) };
        let eta = random_state_dist(&mut rng, ns);
        let lhs = hellinger_norm(&f.min_over_actions(), &g.min_over_actions(), eta.probs());
        let nu = eta.times_policy(&joint_greedy_policy(&f, &g)).expect("shapes agree");
        min_op.record(lhs, hellinger_norm(f.values(), g.values(), nu.probs()));
    }

    [chain, integrated, shift, min_op]
        .into_iter()
        .map(|w| w.finish(n_instances, seed))
        .collect()
}

// ---------------------------------------------------------------------------
// norm suite

/// Admissible distributions in the norm and contraction suites are drawn at steps up to this.
const ADMISSIBLE_MAX_STEP: usize = 8;

pub fn verify_norm_inequalities(seed: u64, n_instances: usize) -> Result<Vec<TheoryReport>> {
    let mut cauchy = Worst::new("triangular_discrimination_bound", NORM_TOL);
    let mut xi_bound = Worst::new("xi_bound", NORM_TOL);
    let mut com = Worst::new("change_of_measure", NORM_TOL);
    let mut sqrt_mean = Worst::new("sqrt_expectation_nonexpansion", NORM_TOL);

    for i in 0..n_instances {
        let mut rng = child_rng(derive_seed(seed, 1), i as u64);
        let mdp = random_instance(&mut rng, 0.95)?;
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let qstar = mdp.solve_optimal_q()?;
        let f = random_table(&mut rng, ns, na, Some(&qstar));
        let nu = random_sa_dist(&mut rng, ns, na);
        let (xi, delta) = XiDelta::pointwise(&f, &qstar);

        let err = diff(f.values(), qstar.values());
        let l1 = weighted_norm(&err, nu.probs(), 1.0);
        let xi1 = weighted_norm(&xi, nu.probs(), 1.0);
        let d2 = weighted_norm(&delta, nu.probs(), 2.0);
        cauchy.record(l1, xi1.sqrt() * d2);
        xi_bound.record(xi1, 4.0 * weighted_norm(qstar.values(), nu.probs(), 1.0) + d2 * d2);

        let eta1 = random_state_dist(&mut rng, ns);
        let mu = random_sa_dist(&mut rng, ns, na);
        let (adm, _) = random_admissible(&mut rng, &mdp, &eta1, ADMISSIBLE_MAX_STEP)?;
        let c = mdp.concentrability(&eta1, &mu, ADMISSIBLE_MAX_STEP)?;
        let g: Vec<f64> = (0..ns * na).map(|_| rng.random_range(-2.0..2.0)).collect();
        for p in [1.0, 2.0, rng.random_range(1.0..5.0)] {
            let rhs = c.powf(1.0 / p) * weighted_norm(&g, mu.probs(), p);
            com.record(weighted_norm(&g, adm.probs(), p), rhs);
        }

        let m = rng.random_range(1..=10);
        let lambda = flat_dirichlet(&mut rng, m);
        let g1: Vec<f64> = (0..m).map(|_| scaled_nonneg(&mut rng)).collect();
        let g2: Vec<f64> = (0..m).map(|_| scaled_nonneg(&mut rng)).collect();
        let e1: f64 = g1.iter().zip(&lambda).map(|(g, w)| g * w).sum();
        let e2: f64 = g2.iter().zip(&lambda).map(|(g, w)| g * w).sum();
        sqrt_mean.record((e1.sqrt() - e2.sqrt()).powi(2), hellinger_norm(&g1, &g2, &lambda).powi(2));
    }

    Ok([cauchy, xi_bound, com, sqrt_mean]
        .into_iter()
        .map(|w| w.finish(n_instances, seed))
        .collect())
}

// ---------------------------------------------------------------------------
// contraction suite

pub fn verify_contraction_suite(seed: u64, n_instances: usize) -> Result<Vec<TheoryReport>> {
    let mut contraction = Worst::new("hellinger_contraction", CONTRACTION_TOL);
    let mut pseudo = Worst::new("pseudo_contraction", CONTRACTION_TOL);
    let mut propagation = Worst::new("error_propagation", CONTRACTION_TOL);

    for i in 0..n_instances {
        let mut rng = child_rng(derive_seed(seed, 2), i as u64);
        let mdp = random_instance(&mut rng, 0.95)?;
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let gamma = mdp.discount();
        let qstar = mdp.solve_optimal_q()?;

        // (i) ||sqrt(Tf) - sqrt(Tg)||_nu <= sqrt(gamma) ||sqrt f - sqrt g||_{nu P x pi_fg}
        let f = random_table(&mut rng, ns, na, Some(&qstar));
        let g = if rng.random_range(0..10) == 0 { f.clone() } else { random_table(&mut rng, ns, na, Some(&qstar)) };
        let nu = random_sa_dist(&mut rng, ns, na);
        let lhs = hellinger_norm(mdp.bellman_apply(&f)?.values(), mdp.bellman_apply(&g)?.values(), nu.probs());
        let next = mdp.propagate(&nu)?.times_policy(&joint_greedy_policy(&f, &g))?;
        contraction.record(lhs, gamma.sqrt() * hellinger_norm(f.values(), g.values(), next.probs()));

        // (ii) pseudo-contraction at q* for an admissible nu
        let eta1 = random_state_dist(&mut rng, ns);
        let mu = random_sa_dist(&mut rng, ns, na);
        let (adm, _) = random_admissible(&mut rng, &mdp, &eta1, ADMISSIBLE_MAX_STEP)?;
        let c = mdp.concentrability(&eta1, &mu, ADMISSIBLE_MAX_STEP)?;
        let lhs = hellinger_norm(f.values(), qstar.values(), adm.probs());
        let rhs = c.sqrt() / (1.0 - gamma.sqrt()) * hellinger_norm(f.values(), qstar.values(), mu.probs());
        pseudo.record(lhs, rhs);

        // (iii) error propagation over an arbitrary sequence f_0..f_k with f_0 in [0,1]
        let k = rng.random_range(1..=5);
        let (adm, h) = random_admissible(&mut rng, &mdp, &eta1, 6)?;
        let c = mdp.concentrability(&eta1, &mu, h + k)?;
        let mut seq = vec![QTable::new(ns, na, (0..ns * na).map(|_| rng.random::<f64>()).collect())?];
        let noise = match rng.random_range(0..4) {
            0 => 0.0,
            _ => 10f64.powf(rng.random_range(-6.0..-0.5)),
        };
        for _ in 0..k {
            let t = mdp.bellman_apply(seq.last().expect("nonempty"))?;
            seq.push(t.map(|v| (v + noise * rng.random_range(-1.0..1.0)).max(0.0)));
        }
        let mut residual: f64 = 0.0;
        for tau in 1..=k {
            let t_prev = mdp.bellman_apply(&seq[tau - 1])?;
            residual = residual.max(hellinger_norm(seq[tau].values(), t_prev.values(), mu.probs()));
        }
        let lhs = hellinger_norm(seq[k].values(), qstar.values(), adm.probs());
        let rhs = gamma.powf(k as f64 / 2.0) + 2.0 * c.sqrt() / (1.0 - gamma) * residual;
        propagation.record(lhs, rhs);
    }

    Ok([contraction, pseudo, propagation]
        .into_iter()
        .map(|w| w.finish(n_instances, seed))
        .collect())
}

// ---------------------------------------------------------------------------
// decomposition suite

/// Quantities for one greedy policy, with occupancies truncated at `horizon`.
struct GreedyInstance {
    gap: f64,
    v_bar_star: f64,
    v_bar_pi: f64,
    /// `<eta_h^pi, q*(., pi) - v*>` for `h = 1..=horizon`.
    stage_regret: Vec<f64>,
    /// `<eta_h^pi, v*>` and `<eta_h^pi, v^pi>`.
    stage_v_star: Vec<f64>,
    stage_v_pi: Vec<f64>,
    regret_bound: Vec<f64>,
    xd: XiDelta,
}

fn greedy_instance(mdp: &TabularMdp, eta1: &StateDist, f: &QTable, qstar: &QTable, horizon: usize) -> Result<GreedyInstance> {
    let pi = greedy_policy_of(f);
    let pi_star = greedy_policy_of(qstar);
    let q_pi = mdp.solve_policy_q(&pi)?;
    let v_pi = q_pi.under_policy(&pi);
    let v_star = qstar.min_over_actions();
    let q_star_pi = qstar.under_policy(&pi);
    let adv: Vec<f64> = q_star_pi.iter().zip(&v_star).map(|(a, b)| a - b).collect();

    let etas = mdp.occupancies(eta1, &pi, horizon)?;
    let xd = XiDelta::compute(f, qstar, &pi, &pi_star, &etas)?;

    let mut stage_regret = Vec::with_capacity(horizon);
    let mut stage_v_star = Vec::with_capacity(horizon);
    let mut stage_v_pi = Vec::with_capacity(horizon);
    let mut regret_bound = Vec::with_capacity(horizon);
    for eta in &etas {
        stage_regret.push(value_of(eta, &adv)?);
        stage_v_star.push(value_of(eta, &v_star)?);
        stage_v_pi.push(value_of(eta, &v_pi)?);
        let on = eta.times_policy(&pi)?;
        let star = eta.times_policy(&pi_star)?;
        let xi_sum = weighted_norm(&xd.xi, on.probs(), 1.0).sqrt() + weighted_norm(&xd.xi, star.probs(), 1.0).sqrt();
        let delta_sum = weighted_norm(&xd.delta, on.probs(), 2.0) + weighted_norm(&xd.delta, star.probs(), 2.0);
        regret_bound.push(xi_sum * delta_sum);
    }

    let v_bar_pi = value_of(eta1, &v_pi)?;
    let v_bar_star = value_of(eta1, &v_star)?;
    Ok(GreedyInstance {
        gap: v_bar_pi - v_bar_star,
        v_bar_star,
        v_bar_pi,
        stage_regret,
        stage_v_star,
        stage_v_pi,
        regret_bound,
        xd,
    })
}

/// Performance difference, regret decomposition, first-order decomposition,
/// the greedy-policy error bound and the tail-value inequality.
///
/// Series over steps are truncated at `horizon`; the discount of each
/// instance is capped so that `gamma^horizon <= 1e-8`. Truncating `D_f` and
/// the step sums on the right only shrinks the bounds. Where a truncated sum
/// sits on the smaller side (the tail-value sum, the performance-difference
/// identity) it is charged the full tail `gamma^horizon / (1 - gamma)`.
pub fn verify_decomposition_suite(seed: u64, n_instances: usize, horizon: usize) -> Result<Vec<TheoryReport>> {
    if horizon == 0 {
        return Err(Error::config("decomposition horizon must be positive"));
    }
    let gamma_max = 0.95f64.min(1e-8f64.powf(1.0 / horizon as f64));
    let mut pdl = Worst::new("performance_difference", DECOMPOSITION_TOL);
    let mut regret = Worst::new("regret_decomposition", DECOMPOSITION_TOL);
    let mut first_order = Worst::new("first_order_decomposition", DECOMPOSITION_TOL);
    let mut greedy = Worst::new("greedy_policy_error_bound", DECOMPOSITION_TOL);
    let mut tail = Worst::new("tail_value", DECOMPOSITION_TOL);

    for i in 0..n_instances {
        let mut rng = child_rng(derive_seed(seed, 3), i as u64);
        let mdp = random_instance(&mut rng, gamma_max)?;
        let gamma = mdp.discount();
        let eta1 = random_state_dist(&mut rng, mdp.n_states());
        let qstar = mdp.solve_optimal_q()?;
        let f = random_table(&mut rng, mdp.n_states(), mdp.n_actions(), Some(&qstar));
        let inst = greedy_instance(&mdp, &eta1, &f, &qstar, horizon)?;

        let discounts: Vec<f64> = (0..horizon).map(|h| gamma.powi(h as i32)).collect();
        let series: f64 = inst.stage_regret.iter().zip(&discounts).map(|(r, d)| r * d).sum();
        let slack = gamma.powi(horizon as i32) / (1.0 - gamma);
        pdl.record((inst.gap - series).abs() - slack, 0.0);

        for (r, b) in inst.stage_regret.iter().zip(&inst.regret_bound) {
            regret.record(*r, *b);
        }

        let d = inst.xd.d_f;
        let sum_sqrt_v_star: f64 = inst.stage_v_star.iter().zip(&discounts).map(|(v, w)| w * v.max(0.0).sqrt()).sum();
        first_order.record(inst.gap, 11.0 * d * sum_sqrt_v_star + 28.0 * d * d / (1.0 - gamma));

        let rhs = 22.0 * std::f64::consts::SQRT_2 * d / (1.0 - gamma) * inst.v_bar_star.max(0.0).sqrt()
            + 512.0 * d * d / (1.0 - gamma).powi(2);
        greedy.record(inst.gap, rhs);

        // v^pi <= 1, so the steps beyond the horizon add at most `slack`
        let lhs: f64 = inst.stage_v_pi.iter().zip(&discounts).map(|(v, w)| w * v.max(0.0).sqrt()).sum();
        tail.record(lhs + slack, 2.0 * inst.v_bar_pi.max(0.0).sqrt() / (1.0 - gamma));
    }

    Ok([pdl, regret, first_order, greedy, tail]
        .into_iter()
        .map(|w| w.finish(n_instances, seed))
        .collect())
}

/// `D_f` of `f` on `mdp` from `eta1`, truncated at `horizon` steps.
pub fn d_f(mdp: &TabularMdp, eta1: &StateDist, f: &QTable, horizon: usize) -> Result<f64> {
    let qstar = mdp.solve_optimal_q()?;
    let pi = greedy_policy_of(f);
    let etas = mdp.occupancies(eta1, &pi, horizon)?;
    Ok(XiDelta::compute(f, &qstar, &pi, &greedy_policy_of(&qstar), &etas)?.d_f)
}

// ---------------------------------------------------------------------------
// concentration

/// A finite function class over a finite input set, with a designated
/// regression function.
#[derive(Clone, Debug)]
pub struct SyntheticClass {
    /// Input distribution.
    pub nu: Vec<f64>,
    pub functions: Vec<Vec<f64>>,
    /// True regression function; must be a member of `functions`.
    pub target: Vec<f64>,
}

impl SyntheticClass {
    /// `class_size` functions on 10 inputs. The target has several values near
    /// zero; the other members perturb it at geometrically spaced scales so
    /// that competitors exist at every resolution.
    pub fn generate(seed: u64, class_size: usize) -> Result<Self> {
        if class_size == 0 {
            return Err(Error::config("class must contain at least one function"));
        }
        let mut rng = child_rng(seed, 0xC1A55);
        let m = 10;
        let nu = flat_dirichlet(&mut rng, m);
        let target: Vec<f64> = (0..m)
            .map(|_| {
                let u: f64 = rng.random();
                (u * u).clamp(0.005, 0.995)
            })
            .collect();
        let mut functions = vec![target.clone()];
        for j in 1..class_size {
            let scale = 0.4 * 0.55f64.powi(j as i32 - 1);
            let f = target
                .iter()
                .map(|&t| {
                    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    (t + sign * scale * (t * (1.0 - t)).sqrt()).clamp(0.001, 0.999)
                })
                .collect();
            functions.push(f);
        }
        Ok(SyntheticClass { nu, functions, target })
    }

    fn target_index(&self) -> Result<usize> {
        self.functions
            .iter()
            .position(|f| f == &self.target)
            .ok_or_else(|| Error::config("regression function is not in the class"))
    }

    /// Exact integrated binary Hellinger loss `||hell^2(f_j, f*)||_{1,nu}`.
    pub fn divergence(&self, j: usize) -> f64 {
        self.functions[j]
            .iter()
            .zip(&self.target)
            .zip(&self.nu)
            .map(|((&a, &b), w)| w * hellinger_sq(Prob::saturating(a), Prob::saturating(b)))
            .sum()
    }

    /// Log-loss empirical risk minimizer over the class (exhaustive search,
    /// lowest index on ties) for one dataset of `n` Bernoulli labels.
    fn erm_on_sample(&self, rng: &mut Rng, n: usize) -> usize {
        let m = self.nu.len();
        let mut counts = vec![0u64; m];
        let mut ones = vec![0u64; m];
        for _ in 0..n {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut x = m - 1;
            for (i, w) in self.nu.iter().enumerate() {
                acc += w;
                if u < acc {
                    x = i;
                    break;
                }
            }
            counts[x] += 1;
            if rng.random::<f64>() < self.target[x] {
                ones[x] += 1;
            }
        }
        let risk = |f: &Vec<f64>| -> f64 {
            (0..m)
                .map(|x| {
                    let (k, z) = (ones[x] as f64, (counts[x] - ones[x]) as f64);
                    -(k * f[x].ln()) - z * (1.0 - f[x]).ln()
                })
                .sum()
        };
        let mut best = 0;
        let mut best_risk = risk(&self.functions[0]);
        for (j, f) in self.functions.iter().enumerate().skip(1) {
            let r = risk(f);
            if r < best_risk {
                best = j;
                best_risk = r;
            }
        }
        best
    }

    /// Divergence of the log-loss ERM for `n_trials` independent datasets of size `n`.
    pub fn erm_divergences(&self, seed: u64, n: usize, n_trials: usize) -> Result<Vec<f64>> {
        self.target_index()?;
        Ok((0..n_trials)
            .map(|t| {
                let mut rng = child_rng(derive_seed(seed, n as u64), t as u64);
                self.divergence(self.erm_on_sample(&mut rng, n))
            })
            .collect())
    }
}

/// Coverage of the bound `||hell^2(f_log, f*)||_{1,nu} <= 2 log(|F| / delta) / n`.
///
/// Passes when the observed coverage is at least `1 - delta` minus two
/// binomial standard errors. The reported violation is the shortfall of the
/// coverage below that threshold.
pub fn concentration_experiment(
    seed: u64,
    n_samples: usize,
    class_size: usize,
    delta: f64,
    n_trials: usize,
) -> Result<TheoryReport> {
    let class = SyntheticClass::generate(seed, class_size)?;
    concentration_experiment_with_class(&class, seed, n_samples, delta, n_trials)
}

pub fn concentration_experiment_with_class(
    class: &SyntheticClass,
    seed: u64,
    n_samples: usize,
    delta: f64,
    n_trials: usize,
) -> Result<TheoryReport> {
    if !(delta > 0.0 && delta < 1.0) || n_samples == 0 || n_trials == 0 {
        return Err(Error::config("need 0 < delta < 1 and positive sample and trial counts"));
    }
    let bound = 2.0 * (class.functions.len() as f64 / delta).ln() / n_samples as f64;
    let divs = class.erm_divergences(seed, n_samples, n_trials)?;
    let covered = divs.iter().filter(|&&d| d <= bound).count() as f64 / n_trials as f64;
    let threshold = 1.0 - delta - 2.0 * (delta * (1.0 - delta) / n_trials as f64).sqrt();
    Ok(TheoryReport::new("log_loss_concentration", n_trials, threshold - covered, 0.0, seed))
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `1/n` rate: the median ERM divergence at `n_large = 4 n_small` must be at
/// most half the median at `n_small` (a factor-2 slack on the ideal 1/4).
pub fn concentration_rate_check(
    seed: u64,
    class_size: usize,
    n_small: usize,
    n_large: usize,
    n_trials: usize,
) -> Result<TheoryReport> {
    let class = SyntheticClass::generate(seed, class_size)?;
    let small = median(&class.erm_divergences(seed, n_small, n_trials)?);
    let large = median(&class.erm_divergences(seed, n_large, n_trials)?);
    Ok(TheoryReport::new("log_loss_concentration_rate", n_trials, large - 0.5 * small, 0.0, seed))
}

// ---------------------------------------------------------------------------

/// Settings of a full oracle run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TheoryConfig {
    pub seed: u64,
    /// Instances for the pointwise and norm suites.
    pub instances: usize,
    pub contraction_instances: usize,
    pub decomposition_instances: usize,
    pub decomposition_horizon: usize,
    pub concentration_samples: usize,
    pub concentration_class_size: usize,
    pub concentration_delta: f64,
    pub concentration_trials: usize,
}

impl TheoryConfig {
    /// MDP-level suites get a fifth and a tenth of `instances`, but never fewer than 1000.
    pub fn new(seed: u64, instances: usize) -> Self {
        TheoryConfig {
            seed,
            instances,
            contraction_instances: (instances / 5).max(1000.min(instances)),
            decomposition_instances: (instances / 10).max(1000.min(instances)),
            decomposition_horizon: 400,
            concentration_samples: 200,
            concentration_class_size: 16,
            concentration_delta: 0.1,
            concentration_trials: 500,
        }
    }
}

pub fn verify_all(cfg: &TheoryConfig) -> Result<Vec<TheoryReport>> {
    let mut out = verify_pointwise_inequalities(cfg.seed, cfg.instances);
    out.extend(verify_norm_inequalities(cfg.seed, cfg.instances)?);
    out.extend(verify_contraction_suite(cfg.seed, cfg.contraction_instances)?);
    out.extend(verify_decomposition_suite(cfg.seed, cfg.decomposition_instances, cfg.decomposition_horizon)?);
    out.push(concentration_experiment(
        cfg.seed,
        cfg.concentration_samples,
        cfg.concentration_class_size,
        cfg.concentration_delta,
        cfg.concentration_trials,
    )?);
    out.push(concentration_rate_check(
        cfg.seed,
        cfg.concentration_class_size,
        cfg.concentration_samples,
        4 * cfg.concentration_samples,
        cfg.concentration_trials,
    )?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all_pass(reports: &[TheoryReport]) {
        for r in reports {
            assert!(r.pass, "{} failed: worst violation {:e}", r.lemma_id, r.worst_violation);
        }
    }

    #[test]
    fn pointwise_suite_passes_and_is_deterministic() {
        let a = verify_pointwise_inequalities(3, 2000);
        all_pass(&a);
        assert_eq!(a, verify_pointwise_inequalities(3, 2000));
        assert_eq!(a.len(), 4);
    }

    #[test]
    fn equal_arguments_give_zero_sides() {
        let f = QTable::new(2, 2, vec![0.1, 0.4, 0.0, 0.9]).unwrap();
        let eta = StateDist::uniform(2);
        let nu = eta.times_policy(&joint_greedy_policy(&f, &f)).unwrap();
        assert_eq!(hellinger_norm(&f.min_over_actions(), &f.min_over_actions(), eta.probs()), 0.0);
        assert_eq!(hellinger_norm(f.values(), f.values(), nu.probs()), 0.0);
    }

    #[test]
    fn norm_suite_passes() {
        all_pass(&verify_norm_inequalities(5, 500).unwrap());
    }

    #[test]
    fn norm_bounds_are_tight_at_q_star() {
        let mdp = random_mdp(2, 3, 2, 0.8).unwrap();
        let q = mdp.solve_optimal_q().unwrap();
        let (xi, delta) = XiDelta::pointwise(&q, &q);
        assert!(delta.iter().all(|&d| d == 0.0));
        let nu = StateActionDist::uniform(3, 2);
        assert_eq!(weighted_norm(&diff(q.values(), q.values()), nu.probs(), 1.0), 0.0);
        for (x, v) in xi.iter().zip(q.values()) {
            assert_eq!(*x, 2.0 * v);
        }
    }

    #[test]
    fn change_of_measure_with_nu_equal_mu() {
        let mdp = random_mdp(9, 3, 2, 0.7).unwrap();
        let eta1 = StateDist::uniform(3);
        let pi = TabularPolicy::new(3, 2, [0.5, 0.5].repeat(3)).unwrap();
        let mu = mdp.nonstationary_occupancy(&eta1, &[pi]).unwrap();
        let c = mdp.concentrability(&eta1, &mu, 1).unwrap();
        assert!(c >= 1.0 - 1e-12);
        let g = [0.3, -1.0, 2.0, 0.1, 0.0, 0.7];
        for p in [1.0, 2.0, 3.5] {
            assert!(weighted_norm(&g, mu.probs(), p) <= c.powf(1.0 / p) * weighted_norm(&g, mu.probs(), p) + 1e-15);
        }
    }

    #[test]
    fn xi_delta_consistency() {
        let mut rng = child_rng(1, 1);
        for _ in 0..200 {
            let mdp = random_instance(&mut rng, 0.9).unwrap();
            let q = mdp.solve_optimal_q().unwrap();
            let f = random_table(&mut rng, mdp.n_states(), mdp.n_actions(), Some(&q));
            let (xi, delta) = XiDelta::pointwise(&f, &q);
            for ((x, d), (a, b)) in xi.iter().zip(&delta).zip(f.values().iter().zip(q.values())) {
                assert!(*x >= 0.0 && d.is_finite());
                if *x > 0.0 {
                    assert!((d * d * x - (a - b).powi(2)).abs() <= 1e-12 * (1.0 + x));
                }
            }
        }
    }

    #[test]
    fn contraction_suite_passes() {
        all_pass(&verify_contraction_suite(7, 300).unwrap());
    }

    #[test]
    fn exact_iteration_reduces_error_propagation() {
        // with f_tau = T f_{tau-1} the residual vanishes and the bound is gamma^(k/2)
        let mdp = random_mdp(4, 4, 2, 0.8).unwrap();
        let q = mdp.solve_optimal_q().unwrap();
        let eta1 = StateDist::uniform(4);
        let mut f = QTable::filled(4, 2, 1.0);
        let k = 4;
        for _ in 0..k {
            f = mdp.bellman_apply(&f).unwrap();
        }
        let pi = TabularPolicy::new(4, 2, [0.5, 0.5].repeat(4)).unwrap();
        let nu = mdp.nonstationary_occupancy(&eta1, &[pi.clone(), pi.clone(), pi]).unwrap();
        let lhs = hellinger_norm(f.values(), q.values(), nu.probs());
        assert!(lhs <= 0.8f64.powf(k as f64 / 2.0));
    }

    #[test]
    fn decomposition_suite_passes() {
        all_pass(&verify_decomposition_suite(11, 150, 400).unwrap());
    }

    #[test]
    fn decomposition_at_q_star_is_tight() {
        let mdp = random_mdp(12, 4, 3, 0.9).unwrap();
        let eta1 = StateDist::uniform(4);
        let q = mdp.solve_optimal_q().unwrap();
        let inst = greedy_instance(&mdp, &eta1, &q, &q, 200).unwrap();
        assert!(inst.gap.abs() < 1e-14);
        assert_eq!(inst.xd.d_f, 0.0);

        let free = mdp.with_cost_scale(0.0).unwrap();
        let f = QTable::new(4, 3, (0..12).map(|i| i as f64 / 12.0).collect()).unwrap();
        let q0 = free.solve_optimal_q().unwrap();
        let inst = greedy_instance(&free, &eta1, &f, &q0, 50).unwrap();
        assert_eq!(inst.v_bar_star, 0.0);
        assert_eq!(inst.gap, 0.0);
    }

    #[test]
    fn d_f_monotone_in_horizon() {
        let mut rng = child_rng(4, 4);
        for _ in 0..50 {
            let mdp = random_instance(&mut rng, 0.9).unwrap();
            let eta1 = random_state_dist(&mut rng, mdp.n_states());
            let q = mdp.solve_optimal_q().unwrap();
            let f = random_table(&mut rng, mdp.n_states(), mdp.n_actions(), Some(&q));
            let mut prev = 0.0;
            for h in [1, 2, 5, 10, 40] {
                let d = d_f(&mdp, &eta1, &f, h).unwrap();
                assert!(d >= prev);
                prev = d;
            }
        }
    }

    #[test]
    fn singleton_class_has_zero_divergence() {
        let r = concentration_experiment(1, 50, 1, 0.1, 40).unwrap();
        assert!(r.pass);
        let class = SyntheticClass::generate(1, 1).unwrap();
        assert!(class.erm_divergences(1, 50, 20).unwrap().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn erm_is_consistent_for_large_samples() {
        let mut class = SyntheticClass::generate(2, 2).unwrap();
        class.functions[1] = class.target.iter().map(|t| 1.0 - t).collect();
        let divs = class.erm_divergences(2, 20_000, 50).unwrap();
        assert!(divs.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn missing_target_is_a_config_error() {
        let mut class = SyntheticClass::generate(3, 4).unwrap();
        class.functions.remove(0);
        assert!(matches!(
            concentration_experiment_with_class(&class, 3, 100, 0.1, 10),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }
}
