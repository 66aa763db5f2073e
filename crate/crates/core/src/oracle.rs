//! Exact computations on a truncated copy of the chain.
//!
//! Every queue is capped at `x_max`; an arrival routed to a full queue is
//! blocked and becomes a self-loop, so kernels stay stochastic. States are
//! enumerated lexicographically in `(x_1, …, x_N)`. Expected costs use the
//! mean sojourn `1 / rate(x)`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::features::Features;
use crate::learner::CostModel;
use crate::policy::{action_probabilities, PolicyParams, ValueModel};
use crate::queueing::{State, SystemConfig};

pub const MAX_STATES: u64 = 10_000_000;
/// Above this many states the stationary law is found iteratively.
pub const DENSE_LIMIT: usize = 3_000;

#[derive(Clone, Debug)]
pub struct TruncatedMdp {
    config: SystemConfig,
    x_max: u32,
    n: usize,
    n_states: usize,
    /// Flat state table, `n` entries per state.
    states: Vec<u32>,
    rate: Vec<f64>,
    /// Target of the arrival edge for each (state, action); self when blocked.
    arrival_to: Vec<usize>,
    /// CSR departure edges per state.
    dep_offsets: Vec<usize>,
    dep_edges: Vec<(usize, f64)>,
    /// c̄(x, a), row-major (state, action).
    expected_cost: Vec<f64>,
}

impl TruncatedMdp {
    pub fn build(config: &SystemConfig, cost: &CostModel, x_max: u32) -> Result<Self> {
        config.validate()?;
        cost.validate(config.n_servers())?;
        if x_max < 1 {
            return Err(Error::arg("x_max must be at least 1"));
        }
        let n = config.n_servers();
        let side = x_max as u64 + 1;
        let count = side.checked_pow(n as u32).unwrap_or(u64::MAX);
        if count > MAX_STATES {
            // states, rates, arrival targets, departures and costs
            let per_state = 4 * n as u64 + 8 + 8 * n as u64 + 16 * n as u64 + 8 * n as u64;
            return Err(Error::StateSpaceTooLarge {
                states: count,
                limit: MAX_STATES,
                bytes: count.saturating_mul(per_state),
            });
        }
        let n_states = count as usize;
        let mut states = Vec::with_capacity(n_states * n);
        let mut cur = vec![0u32; n];
        for _ in 0..n_states {
            states.extend_from_slice(&cur);
            // Lexicographic increment with x_1 most significant.
            for i in (0..n).rev() {
                if cur[i] < x_max {
                    cur[i] += 1;
                    break;
                }
                cur[i] = 0;
            }
        }
        let stride: Vec<usize> = (0..n).map(|i| side.pow((n - 1 - i) as u32) as usize).collect();
        let mut rate = Vec::with_capacity(n_states);
        let mut arrival_to = Vec::with_capacity(n_states * n);
        let mut dep_offsets = Vec::with_capacity(n_states + 1);
        let mut dep_edges = Vec::new();
        let mut expected_cost = Vec::with_capacity(n_states * n);
        let mut scratch = vec![0u32; n];
        for s in 0..n_states {
            let x = &states[s * n..(s + 1) * n];
            let r = config.lambda
                + x.iter()
                    .zip(&config.mu)
                    .filter(|(&v, _)| v > 0)
                    .map(|(_, m)| m)
                    .sum::<f64>();
            rate.push(r);
            dep_offsets.push(dep_edges.len());
            let mut dep_cost = 0.0;
            for i in 0..n {
                if x[i] > 0 {
                    let p = config.mu[i] / r;
                    dep_edges.push((s - stride[i], p));
                    scratch.copy_from_slice(x);
                    scratch[i] -= 1;
                    dep_cost += p * cost.rate(&scratch);
                }
            }
            for a in 0..n {
                let (to, arr_cost) = if x[a] < x_max {
                    scratch.copy_from_slice(x);
                    scratch[a] += 1;
                    (s + stride[a], cost.rate(&scratch))
                } else {
                    (s, cost.rate(x))
                };
                arrival_to.push(to);
                expected_cost.push((config.lambda / r * arr_cost + dep_cost) / r);
            }
        }
        dep_offsets.push(dep_edges.len());
        Ok(TruncatedMdp {
            config: config.clone(),
            x_max,
            n,
            n_states,
            states,
            rate,
            arrival_to,
            dep_offsets,
            dep_edges,
            expected_cost,
        })
    }

    pub fn config(&self) -> &SystemConfig {
        &self.config
    }

    pub fn x_max(&self) -> u32 {
        self.x_max
    }

    pub fn n_servers(&self) -> usize {
        self.n
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn state(&self, s: usize) -> &[u32] {
        &self.states[s * self.n..(s + 1) * self.n]
    }

    pub fn index_of(&self, x: &[u32]) -> Option<usize> {
        if x.len() != self.n || x.iter().any(|&v| v > self.x_max) {
            return None;
        }
        let side = self.x_max as usize + 1;
        Some(x.iter().fold(0usize, |acc, &v| acc * side + v as usize))
    }

    pub fn rate(&self, s: usize) -> f64 {
        self.rate[s]
    }

    /// c̄(x, a).
    pub fn expected_cost(&self, s: usize, a: usize) -> f64 {
        self.expected_cost[s * self.n + a]
    }

    pub fn is_boundary(&self, s: usize) -> bool {
        self.state(s).iter().any(|&v| v == self.x_max)
    }

    /// Successors of (s, a) with their probabilities; the arrival edge first.
    pub fn successors(&self, s: usize, a: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let arrival = (self.arrival_to[s * self.n + a], self.config.lambda / self.rate[s]);
        std::iter::once(arrival).chain(self.dep_edges[self.dep_offsets[s]..self.dep_offsets[s + 1]].iter().copied())
    }

    /// Σ_{x′} p(x′|x,a)·v(x′).
    #[inline]
    pub fn expect(&self, s: usize, a: usize, v: &[f64]) -> f64 {
        self.successors(s, a).map(|(t, p)| p * v[t]).sum()
    }
}

pub fn build_truncated(config: &SystemConfig, cost: &CostModel, x_max: u32) -> Result<TruncatedMdp> {
    TruncatedMdp::build(config, cost, x_max)
}

/// Q table, row-major (state, action).
#[derive(Clone, Debug, PartialEq)]
pub struct QTable {
    pub n_actions: usize,
    pub values: Vec<f64>,
    pub iterations: usize,
    /// Sup-norm change per sweep.
    pub residuals: Vec<f64>,
}

impl QTable {
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn n_states(&self) -> usize {
        self.values.len() / self.n_actions
    }
}

pub const DEFAULT_MAX_SWEEPS: usize = 1_000_000;

/// Q*(x,a) = c̄(x,a) + γ Σ p(x′|x,a) min_{a′} Q*(x′,a′), by successive
/// approximation from Q = 0. Stops once the sweep-to-sweep change is at
/// most `tol·(1−γ)/γ`, which bounds the distance to Q* by `tol`.
pub fn value_iteration(mdp: &TruncatedMdp, gamma: f64, tol: f64) -> Result<QTable> {
    value_iteration_capped(mdp, gamma, tol, DEFAULT_MAX_SWEEPS)
}

pub fn value_iteration_capped(mdp: &TruncatedMdp, gamma: f64, tol: f64, max_sweeps: usize) -> Result<QTable> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::arg(format!("gamma must lie in [0, 1), got {gamma}")));
    }
    if !(tol > 0.0) {
        return Err(Error::arg("tolerance must be positive"));
    }
    let n = mdp.n;
    let s_count = mdp.n_states;
    let mut q: Vec<f64> = mdp.expected_cost.clone();
    if gamma == 0.0 {
        return Ok(QTable {
            n_actions: n,
            values: q,
            iterations: 1,
            residuals: vec![],
        });
    }
    let threshold = tol * (1.0 - gamma) / gamma;
    let mut v = vec![0.0; s_count];
    let mut residuals = Vec::new();
    for sweep in 1..=max_sweeps {
        for (s, vs) in v.iter_mut().enumerate() {
            *vs = q[s * n..(s + 1) * n].iter().cloned().fold(f64::INFINITY, f64::min);
        }
        let mut diff = 0.0_f64;
        for s in 0..s_count {
            for a in 0..n {
                let new = mdp.expected_cost(s, a) + gamma * mdp.expect(s, a, &v);
                diff = diff.max((new - q[s * n + a]).abs());
                q[s * n + a] = new;
            }
        }
        residuals.push(diff);
        if diff <= threshold {
            return Ok(QTable {
                n_actions: n,
                values: q,
                iterations: sweep,
                residuals,
            });
        }
    }
    Err(Error::NoConvergence {
        what: "value iteration",
        iterations: max_sweeps,
        residual: residuals.last().copied().unwrap_or(f64::NAN),
    })
}

/// argmin_a Q(x, a) per state, lowest index on ties.
pub fn greedy_policy(q: &QTable) -> Vec<usize> {
    (0..q.n_states())
        .map(|s| {
            let row = q.row(s);
            let mut best = 0;
            for a in 1..row.len() {
                if row[a] < row[best] {
                    best = a;
                }
            }
            best
        })
        .collect()
}

/// Stochastic policy table π(a|x), row-major (state, action).
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyTable {
    pub n_actions: usize,
    pub probs: Vec<f64>,
}

impl PolicyTable {
    pub fn deterministic(actions: &[usize], n_actions: usize) -> Self {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            probs[s * n_actions + a] = 1.0;
        }
        PolicyTable { n_actions, probs }
    }

    pub fn from_policy(mdp: &TruncatedMdp, policy: &PolicyParams, model: Option<&ValueModel<'_>>) -> Result<Self> {
        let n = mdp.n;
        let mut probs = Vec::with_capacity(mdp.n_states * n);
        for s in 0..mdp.n_states {
            let p = action_probabilities(policy, model, &State(mdp.state(s).to_vec()))?;
            probs.extend_from_slice(&p);
        }
        Ok(PolicyTable { n_actions: n, probs })
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    fn validate(&self, mdp: &TruncatedMdp) -> Result<()> {
        if self.n_actions != mdp.n || self.probs.len() != mdp.n_states * mdp.n {
            return Err(Error::arg("policy table does not match the truncated MDP"));
        }
        for s in 0..mdp.n_states {
            let row = &self.probs[s * self.n_actions..(s + 1) * self.n_actions];
            if row.iter().any(|p| !(*p >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::arg(format!("policy row {s} is not a probability vector")));
            }
        }
        Ok(())
    }
}

/// d ↦ dP for the state chain under `policy`.
fn push_forward(mdp: &TruncatedMdp, policy: &PolicyTable, d: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for (s, &mass) in d.iter().enumerate() {
        if mass == 0.0 {
            continue;
        }
        for a in 0..mdp.n {
            let pa = policy.get(s, a);
            if pa == 0.0 {
                continue;
            }
            for (t, p) in mdp.successors(s, a) {
                out[t] += mass * pa * p;
            }
        }
    }
}

/// ‖dP − d‖₁.
pub fn invariance_residual(mdp: &TruncatedMdp, policy: &PolicyTable, d: &[f64]) -> f64 {
    let mut next = vec![0.0; d.len()];
    push_forward(mdp, policy, d, &mut next);
    next.iter().zip(d).map(|(a, b)| (a - b).abs()).sum()
}

/// Invariant law of the embedded chain under `policy`: a dense linear solve
/// for small spaces, lazy power iteration (which sidesteps the parity
/// periodicity of the birth–death structure) otherwise.
pub fn stationary_distribution(mdp: &TruncatedMdp, policy: &PolicyTable, tol: f64) -> Result<Vec<f64>> {
    policy.validate(mdp)?;
    if !(tol > 0.0) {
        return Err(Error::arg("tolerance must be positive"));
    }
    let s_count = mdp.n_states;
    let d = if s_count <= DENSE_LIMIT {
        // (Pᵀ − I) d = 0 with the last equation replaced by Σ d = 1.
        let mut m = DMatrix::<f64>::zeros(s_count, s_count);
        for s in 0..s_count {
            for a in 0..mdp.n {
                let pa = policy.get(s, a);
                if pa == 0.0 {
                    continue;
                }
                for (t, p) in mdp.successors(s, a) {
                    m[(t, s)] += pa * p;
                }
            }
            m[(s, s)] -= 1.0;
        }
        for s in 0..s_count {
            m[(s_count - 1, s)] = 1.0;
        }
        let mut rhs = DVector::<f64>::zeros(s_count);
        rhs[s_count - 1] = 1.0;
        let sol = m
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Numeric("stationary system is singular".into()))?;
        let mut d: Vec<f64> = sol.iter().map(|v| v.max(0.0)).collect();
        let total: f64 = d.iter().sum();
        d.iter_mut().for_each(|v| *v /= total);
        d
    } else {
        lazy_power_iteration(mdp, policy, tol)?
    };
    let res = invariance_residual(mdp, policy, &d);
    if res > tol {
        return Err(Error::NoConvergence {
            what: "stationary distribution",
            iterations: 0,
            residual: res,
        });
    }
    Ok(d)
}

fn lazy_power_iteration(mdp: &TruncatedMdp, policy: &PolicyTable, tol: f64) -> Result<Vec<f64>> {
    let s_count = mdp.n_states;
    let mut d = vec![1.0 / s_count as f64; s_count];
    let mut next = vec![0.0; s_count];
    let max_iter = 2_000_000;
    let mut res = f64::INFINITY;
    for it in 0..max_iter {
        push_forward(mdp, policy, &d, &mut next);
        if it % 64 == 0 {
            res = next.iter().zip(&d).map(|(a, b)| (a - b).abs()).sum();
            if res <= tol * 0.5 {
                return Ok(d);
            }
        }
        for (dv, nv) in d.iter_mut().zip(&next) {
            *dv = 0.5 * (*dv + nv);
        }
    }
    Err(Error::NoConvergence {
        what: "stationary distribution (power iteration)",
        iterations: max_iter,
        residual: res,
    })
}

/// Stationary mass on states with some queue at the cap.
pub fn boundary_mass(mdp: &TruncatedMdp, d: &[f64]) -> f64 {
    (0..mdp.n_states).filter(|&s| mdp.is_boundary(s)).map(|s| d[s]).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Projection {
    pub w: Vec<f64>,
    /// sqrt(Σ d(x)π(a|x)(Q(x,a) − Q̂(x,a;w))²).
    pub residual: f64,
    pub condition: f64,
}

const RANK_TOL: f64 = 1e-13;

fn solve_checked(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    let svd = a.clone().svd(true, true);
    let sv = &svd.singular_values;
    let max = sv.max();
    let min = sv.min();
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(max > 0.0) || min <= max * RANK_TOL {
        // Name the columns carrying the null direction.
        let v_t = svd.v_t.as_ref().expect("requested V");
        let (idx, _) = sv.iter().enumerate().fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
        let null = v_t.row(idx);
        let peak = null.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let columns = null
            .iter()
            .enumerate()
            .filter(|(_, v)| v.abs() > 0.1 * peak)
            .map(|(i, _)| i)
            .collect();
        return Err(Error::RankDeficient { columns, condition });
    }
    // LU gives a cleaner solution than the truncated SVD for well-posed systems.
    let x = a
        .clone()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::Numeric("singular system".into()))?;
    Ok((x, condition))
}

/// Weighted least-squares projection of a Q table onto the feature span,
/// with weights d(x)·π(a|x).
pub fn optimal_weights(
    mdp: &TruncatedMdp,
    q: &QTable,
    policy: &PolicyTable,
    d: &[f64],
    features: &Features,
) -> Result<Projection> {
    policy.validate(mdp)?;
    if features.n_servers() != mdp.n || d.len() != mdp.n_states || q.n_states() != mdp.n_states {
        return Err(Error::arg("oracle inputs disagree on dimensions"));
    }
    let dim = features.dim();
    let mut gram = DMatrix::<f64>::zeros(dim, dim);
    let mut rhs = DVector::<f64>::zeros(dim);
    let mut phi = vec![0.0; dim];
    for s in 0..mdp.n_states {
        for a in 0..mdp.n {
            let weight = d[s] * policy.get(s, a);
            if weight == 0.0 {
                continue;
            }
            features.fill_phi(mdp.state(s), a, &mut phi);
            let target = q.get(s, a);
            for i in 0..dim {
                rhs[i] += weight * phi[i] * target;
                for j in 0..dim {
                    gram[(i, j)] += weight * phi[i] * phi[j];
                }
            }
        }
    }
    let (w, condition) = solve_checked(&gram, &rhs)?;
    let w: Vec<f64> = w.iter().copied().collect();
    let mut sq = 0.0;
    for s in 0..mdp.n_states {
        for a in 0..mdp.n {
            let weight = d[s] * policy.get(s, a);
            if weight > 0.0 {
                let e = q.get(s, a) - features.q_unchecked(&w, mdp.state(s), a);
                sq += weight * e * e;
            }
        }
    }
    Ok(Projection {
        w,
        residual: sq.sqrt(),
        condition,
    })
}

/// Stationary averages of the SARSA update direction under π_w:
/// ḡ = E[φ(x,a)(γφ(x′,a′) − φ(x,a))ᵀ], r̄ = E[φ(x,a)·c̄(x,a)].
#[derive(Clone, Debug)]
pub struct MeanUpdate {
    pub g: DMatrix<f64>,
    pub r: DVector<f64>,
    pub d: Vec<f64>,
    pub policy: PolicyTable,
}

impl MeanUpdate {
    /// ‖ḡ·w + r̄‖₂.
    pub fn residual(&self, w: &[f64]) -> f64 {
        (&self.g * DVector::from_column_slice(w) + &self.r).norm()
    }
}

pub fn mean_update(mdp: &TruncatedMdp, features: &Features, gamma: f64, iota: f64, w: &[f64], tol: f64) -> Result<MeanUpdate> {
    let model = ValueModel::new(features, w)?;
    let policy = PolicyTable::from_policy(mdp, &PolicyParams::Softmax { iota }, Some(&model))?;
    let d = stationary_distribution(mdp, &policy, tol)?;
    let dim = features.dim();
    let n = mdp.n;
    // ψ(x′) = Σ_{a′} π(a′|x′)·φ(x′, a′).
    let mut psi = vec![0.0; mdp.n_states * dim];
    let mut phi = vec![0.0; dim];
    for s in 0..mdp.n_states {
        for a in 0..n {
            let pa = policy.get(s, a);
            features.fill_phi(mdp.state(s), a, &mut phi);
            for i in 0..dim {
                psi[s * dim + i] += pa * phi[i];
            }
        }
    }
    let mut g = DMatrix::<f64>::zeros(dim, dim);
    let mut r = DVector::<f64>::zeros(dim);
    let mut next = vec![0.0; dim];
    for s in 0..mdp.n_states {
        if d[s] == 0.0 {
            continue;
        }
        for a in 0..n {
            let weight = d[s] * policy.get(s, a);
            if weight == 0.0 {
                continue;
            }
            features.fill_phi(mdp.state(s), a, &mut phi);
            next.iter_mut().for_each(|v| *v = 0.0);
            for (t, p) in mdp.successors(s, a) {
                for i in 0..dim {
                    next[i] += p * psi[t * dim + i];
                }
            }
            let c = mdp.expected_cost(s, a);
            for i in 0..dim {
                r[i] += weight * phi[i] * c;
                for j in 0..dim {
                    g[(i, j)] += weight * phi[i] * (gamma * next[j] - phi[j]);
                }
            }
        }
    }
    Ok(MeanUpdate { g, r, d, policy })
}

#[derive(Clone, Debug)]
pub struct FixedPoint {
    pub w: Vec<f64>,
    /// ‖ḡ_w·w + r̄_w‖₂ at the returned w.
    pub residual: f64,
    pub iterations: usize,
    pub boundary_mass: f64,
    pub d: Vec<f64>,
    pub policy: PolicyTable,
}

#[derive(Clone, Copy, Debug)]
pub struct FixedPointOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// w ← w + β·(w_next − w).
    pub damping: f64,
    pub stationary_tol: f64,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        FixedPointOptions {
            tol: 1e-9,
            max_iter: 500,
            damping: 1.0,
            stationary_tol: 1e-11,
        }
    }
}

/// Weight vector at which the stationary-averaged SARSA direction vanishes:
/// repeatedly solve ḡ_w·w_next = −r̄_w with π_w and d_w taken at the current
/// iterate.
pub fn sarsa_fixed_point(
    mdp: &TruncatedMdp,
    features: &Features,
    gamma: f64,
    iota: f64,
    w_init: &[f64],
    options: FixedPointOptions,
) -> Result<FixedPoint> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::arg(format!("gamma must lie in [0, 1), got {gamma}")));
    }
    if w_init.len() != features.dim() {
        return Err(Error::arg("initial weights do not match the basis"));
    }
    let mut w = w_init.to_vec();
    let mut step = f64::INFINITY;
    for it in 1..=options.max_iter {
        let mu = mean_update(mdp, features, gamma, iota, &w, options.stationary_tol)?;
        let residual = mu.residual(&w);
        if step <= options.tol && residual <= options.tol {
            return Ok(FixedPoint {
                boundary_mass: boundary_mass(mdp, &mu.d),
                w,
                residual,
                iterations: it - 1,
                d: mu.d,
                policy: mu.policy,
            });
        }
        let (next, _) = solve_checked(&mu.g, &(-&mu.r))?;
        step = 0.0;
        for (wi, ni) in w.iter_mut().zip(next.iter()) {
            let delta = options.damping * (ni - *wi);
            step += delta * delta;
            *wi += delta;
        }
        step = step.sqrt();
        if !step.is_finite() {
            return Err(Error::Numeric(format!("fixed-point iteration diverged at iteration {it}")));
        }
    }
    let mu = mean_update(mdp, features, gamma, iota, &w, options.stationary_tol)?;
    Err(Error::NoConvergence {
        what: "SARSA fixed point",
        iterations: options.max_iter,
        residual: mu.residual(&w).max(step),
    })
}

/// max over states with positive mass of |Q̂(x,a) − c̄(x,a) − γ Σ p Σ π Q̂(x′,a′)|.
pub fn bellman_residual(
    mdp: &TruncatedMdp,
    features: &Features,
    w: &[f64],
    policy: &PolicyTable,
    d: &[f64],
    gamma: f64,
) -> f64 {
    let n = mdp.n;
    let v: Vec<f64> = (0..mdp.n_states)
        .map(|s| (0..n).map(|a| policy.get(s, a) * features.q_unchecked(w, mdp.state(s), a)).sum())
        .collect();
    let mut worst = 0.0_f64;
    for s in 0..mdp.n_states {
        if d[s] <= 0.0 {
            continue;
        }
        for a in 0..n {
            if policy.get(s, a) == 0.0 {
                continue;
            }
            let q = features.q_unchecked(w, mdp.state(s), a);
            let target = mdp.expected_cost(s, a) + gamma * mdp.expect(s, a, &v);
            worst = worst.max((q - target).abs());
        }
    }
    worst
}
