//! Restrained semi-gradient SARSA(0).
//!
//! Each epoch applies
//!
//! ```text
//! Δ      = c + γ·Q̂(x′, a′; w) − Q̂(x, a; w)
//! B_α    = max(1, max_n α·Δ·φ[n,H](x,a) / (w_l − w[n,H]))
//! w     ← w + (α / B_α)·Δ·φ(x, a)
//! ```
//!
//! where the divisor `B_α` shrinks the step just enough to keep every
//! highest-degree weight at or above the floor `w_l`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{BasisFn, Features};
use crate::policy::{ActionSampler, PolicyParams, ValueModel};
use crate::queueing::{Simulator, State, SystemConfig, TimeMode, Trajectory};
use crate::rng::{RngStreams, SimRng};

/// One-step cost charged on entering `x′` and held for `Δt`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CostModel {
    /// Σ_n C_n(x′_n)·Δt.
    Separable { per_server: Vec<BasisFn> },
    /// log(max(‖x′‖₁, 1))·Δt.
    AggregateLog,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel::AggregateLog
    }
}

impl CostModel {
    pub fn validate(&self, n_servers: usize) -> Result<()> {
        if let CostModel::Separable { per_server } = self {
            if per_server.len() != n_servers {
                return Err(Error::arg(format!(
                    "separable cost has {} functions for {n_servers} servers",
                    per_server.len()
                )));
            }
            for f in per_server {
                f.validate()?;
            }
        }
        Ok(())
    }

    /// Cost rate of occupying `x` (per unit time).
    pub fn rate(&self, x: &[u32]) -> f64 {
        match self {
            CostModel::Separable { per_server } => per_server
                .iter()
                .zip(x)
                .map(|(f, &v)| f.value(v as f64))
                .sum(),
            CostModel::AggregateLog => {
                let total: u64 = x.iter().map(|&v| v as u64).sum();
                (total.max(1) as f64).ln()
            }
        }
    }

    pub fn one_step(&self, next_state: &State, dt: f64) -> f64 {
        if dt == 0.0 {
            return 0.0;
        }
        self.rate(next_state.as_slice()) * dt
    }
}

pub fn one_step_cost(cost: &CostModel, next_state: &State, dt: f64) -> Result<f64> {
    if !(dt >= 0.0) {
        return Err(Error::arg(format!("holding time must be non-negative, got {dt}")));
    }
    Ok(cost.one_step(next_state, dt))
}

/// α_k = α₀·τ / (τ + k).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSchedule {
    pub alpha0: f64,
    pub tau: f64,
}

impl StepSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha0.is_finite() && self.alpha0 >= 0.0 && self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::arg(format!("invalid step schedule {self:?}")));
        }
        Ok(())
    }

    #[inline]
    pub fn alpha(&self, k: u64) -> f64 {
        self.alpha0 * self.tau / (self.tau + k as f64)
    }

    /// Σ_{k<K} α_k ≥ α₀·τ·ln((τ+K)/τ), which grows without bound.
    pub fn partial_sum_lower_bound(&self, horizon: u64) -> f64 {
        self.alpha0 * self.tau * ((self.tau + horizon as f64) / self.tau).ln()
    }

    /// Σ_k α_k² ≤ α₀²·τ²·(1/τ² + 1/τ) = α₀²·(1 + τ).
    pub fn sum_squares_bound(&self) -> f64 {
        self.alpha0 * self.alpha0 * (1.0 + self.tau)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightInit {
    /// Each coordinate uniform on [low, high); highest-degree weights are
    /// lifted to at least w_l + ε_l.
    Uniform { low: f64, high: f64 },
    Explicit { w: Vec<f64> },
}

impl Default for WeightInit {
    fn default() -> Self {
        WeightInit::Uniform { low: 0.0, high: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnerParams {
    pub gamma: f64,
    pub w_l: f64,
    pub eps_l: f64,
    pub schedule: StepSchedule,
    pub init: WeightInit,
    /// Abort when ‖w‖∞ exceeds this.
    pub divergence_ceiling: f64,
}

impl Default for LearnerParams {
    fn default() -> Self {
        LearnerParams {
            gamma: 0.99,
            w_l: 0.05,
            eps_l: 1e-3,
            schedule: StepSchedule {
                alpha0: 0.05,
                tau: 1e5,
            },
            init: WeightInit::default(),
            divergence_ceiling: 1e9,
        }
    }
}

impl LearnerParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::arg(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if !(self.w_l.is_finite() && self.w_l > 0.0) {
            return Err(Error::arg(format!("w_l must be positive, got {}", self.w_l)));
        }
        if !(self.eps_l.is_finite() && self.eps_l > 0.0) {
            return Err(Error::arg(format!("eps_l must be positive, got {}", self.eps_l)));
        }
        if !(self.divergence_ceiling > 0.0) {
            return Err(Error::arg("divergence ceiling must be positive"));
        }
        if let WeightInit::Uniform { low, high } = self.init {
            if !(low.is_finite() && high.is_finite() && low < high) {
                return Err(Error::arg("uniform init needs low < high"));
            }
        }
        self.schedule.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnerState {
    pub w: Vec<f64>,
    pub k: u64,
    pub gamma: f64,
    pub w_l: f64,
    pub eps_l: f64,
    pub schedule: StepSchedule,
    pub last_b_alpha: f64,
    /// Flat indices of the floor-protected weights w[n,H].
    pub highest: Vec<usize>,
}

impl LearnerState {
    pub fn new(params: &LearnerParams, features: &Features, rng: &mut SimRng) -> Result<Self> {
        params.validate()?;
        let dim = features.dim();
        let highest: Vec<usize> = (0..features.n_servers())
            .map(|n| features.spec().highest_index(n))
            .collect();
        let w = match &params.init {
            WeightInit::Uniform { low, high } => {
                let mut w: Vec<f64> = (0..dim).map(|_| rng.random_range(*low..*high)).collect();
                for &i in &highest {
                    w[i] = w[i].max(params.w_l + params.eps_l);
                }
                w
            }
            WeightInit::Explicit { w } => {
                if w.len() != dim {
                    return Err(Error::arg(format!("explicit init has {} weights, basis needs {dim}", w.len())));
                }
                if let Some(&i) = highest.iter().find(|&&i| w[i] < params.w_l) {
                    return Err(Error::arg(format!("initial w[{i}] = {} is below the floor {}", w[i], params.w_l)));
                }
                w.clone()
            }
        };
        Ok(LearnerState {
            w,
            k: 0,
            gamma: params.gamma,
            w_l: params.w_l,
            eps_l: params.eps_l,
            schedule: params.schedule,
            last_b_alpha: 1.0,
            highest,
        })
    }

    pub fn min_highest_weight(&self) -> f64 {
        self.highest.iter().map(|&i| self.w[i]).fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs_weight(&self) -> f64 {
        self.w.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// TD error Δ = c + γ·Q̂(x′,a′;w) − Q̂(x,a;w).
#[allow(clippy::too_many_arguments)]
pub fn td_error(
    features: &Features,
    w: &[f64],
    gamma: f64,
    x: &State,
    a: usize,
    c: f64,
    x_next: &State,
    a_next: usize,
) -> Result<f64> {
    let q = crate::features::q_hat(features, w, x, a)?;
    let q_next = crate::features::q_hat(features, w, x_next, a_next)?;
    let delta = c + gamma * q_next - q;
    if !delta.is_finite() {
        return Err(Error::Numeric(format!("TD error {delta} at x = {:?}, a = {a}", x.0)));
    }
    Ok(delta)
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct RestraintOutcome {
    b_alpha: f64,
    /// The coordinate whose ratio set B_α, when B_α > 1.
    binding: Option<usize>,
}

fn restraint_detail(alpha: f64, delta: f64, phi: &[f64], w: &[f64], w_l: f64, highest: &[usize]) -> RestraintOutcome {
    let mut out = RestraintOutcome {
        b_alpha: 1.0,
        binding: None,
    };
    for &i in highest {
        let step = alpha * delta * phi[i];
        if step >= 0.0 {
            continue;
        }
        let room = w_l - w[i];
        if room >= 0.0 {
            // Already at the floor: this coordinate is pinned, not divided.
            continue;
        }
        let ratio = step / room;
        if ratio > out.b_alpha {
            out.b_alpha = ratio;
            out.binding = Some(i);
        }
    }
    out
}

/// B_α = max(1, max_n α·Δ·φ[n,H] / (w_l − w[n,H])).
///
/// Coordinates already sitting exactly on the floor with a downward step are
/// left out of the maximum; [`sgs_step`] pins them to `w_l` instead.
pub fn restraint(alpha: f64, delta: f64, phi: &[f64], w: &[f64], w_l: f64, highest: &[usize]) -> f64 {
    restraint_detail(alpha, delta, phi, w, w_l, highest).b_alpha
}

/// One SARSA transition `(x, a, c, x′, a′)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition<'t> {
    pub x: &'t [u32],
    pub a: usize,
    pub cost: f64,
    pub x_next: &'t [u32],
    pub a_next: usize,
}

/// Applies one restrained update in place; returns the B_α used.
pub fn sgs_step(learner: &mut LearnerState, features: &Features, t: &Transition<'_>, scratch: &mut Vec<f64>) -> Result<f64> {
    let dim = features.dim();
    scratch.resize(dim, 0.0);
    features.fill_phi(t.x, t.a, scratch);
    let q = features.q_unchecked(&learner.w, t.x, t.a);
    let q_next = features.q_unchecked(&learner.w, t.x_next, t.a_next);
    let delta = t.cost + learner.gamma * q_next - q;
    if !delta.is_finite() || scratch.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "TD error {delta} at epoch {}: x = {:?}, a = {}, x′ = {:?}, a′ = {}, w = {:?}",
            learner.k, t.x, t.a, t.x_next, t.a_next, learner.w
        )));
    }
    let alpha = learner.schedule.alpha(learner.k);
    let r = restraint_detail(alpha, delta, scratch, &learner.w, learner.w_l, &learner.highest);
    let scale = alpha * delta / r.b_alpha;
    for (w, phi) in learner.w.iter_mut().zip(scratch.iter()) {
        *w += scale * phi;
    }
    if let Some(i) = r.binding {
        learner.w[i] = learner.w_l;
    }
    for &i in &learner.highest {
        if learner.w[i] < learner.w_l {
            learner.w[i] = learner.w_l;
        }
    }
    learner.k += 1;
    learner.last_b_alpha = r.b_alpha;
    debug_assert!(learner.min_highest_weight() >= learner.w_l);
    Ok(r.b_alpha)
}

/// Periodic training summary over the epochs since the previous snapshot.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Snapshot {
    pub k: u64,
    pub w: Vec<f64>,
    /// Σc / Σdt over the window.
    pub window_cost: f64,
    /// Time-weighted mean ‖x‖₁ over the window.
    pub window_q_len: f64,
    pub b_alpha_max: f64,
    pub min_highest_weight: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub time_mode: TimeMode,
    pub initial_state: Option<State>,
    /// Emit a snapshot every this many epochs (0 disables).
    pub snapshot_every: u64,
    /// Also emit snapshots at these epochs.
    pub checkpoints: Vec<u64>,
    pub record_trajectory: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            time_mode: TimeMode::Sampled,
            initial_state: None,
            snapshot_every: 10_000,
            checkpoints: Vec::new(),
            record_trajectory: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub learner: LearnerState,
    pub trace: Vec<Snapshot>,
    pub trajectory: Option<Trajectory>,
    /// Epochs where the restraint was active (B_α > 1).
    pub restrained_steps: u64,
    pub total_time: f64,
    pub total_cost: f64,
}

struct Window {
    cost: f64,
    time: f64,
    q_area: f64,
    b_max: f64,
}

impl Window {
    fn new() -> Self {
        Window {
            cost: 0.0,
            time: 0.0,
            q_area: 0.0,
            b_max: 1.0,
        }
    }
}

/// On-policy training: at each epoch draw `a[k]` from π_{w[k]}, sample the
/// transition and its cost, draw `a[k+1]` from π_{w[k]} at `x[k+1]`, then
/// update. The action for epoch `k+1` is the bootstrap action `a[k+1]`.
#[allow(clippy::too_many_arguments)]
pub fn train(
    config: &SystemConfig,
    features: &Features,
    cost: &CostModel,
    policy: &PolicyParams,
    mut learner: LearnerState,
    horizon: u64,
    streams: RngStreams,
    options: &TrainOptions,
    divergence_ceiling: f64,
    mut sink: impl FnMut(&Snapshot),
) -> Result<TrainOutcome> {
    config.validate()?;
    cost.validate(config.n_servers())?;
    if !matches!(policy, PolicyParams::Softmax { .. }) {
        return Err(Error::arg("training is on-policy with a softmax policy"));
    }
    policy.validate(config.n_servers())?;
    if features.n_servers() != config.n_servers() || learner.w.len() != features.dim() {
        return Err(Error::arg("basis, weights and system disagree on dimensions"));
    }
    let n = config.n_servers();
    let initial = options.initial_state.clone().unwrap_or_else(|| State::zeros(n));
    let mut sim = Simulator::new(config, initial, options.time_mode, streams)?;
    let mut sampler = ActionSampler::new(policy.clone(), n);
    let mut trace = Vec::new();
    let mut trajectory = options.record_trajectory.then(|| {
        let mut t = Trajectory::new(n);
        t.states.reserve(horizon as usize * n);
        t
    });
    let mut outcome_counts = (0u64, 0.0f64, 0.0f64);
    if horizon == 0 {
        if let Some(t) = trajectory.as_mut() {
            t.final_state = sim.state().clone();
        }
        return Ok(TrainOutcome {
            learner,
            trace,
            trajectory,
            restrained_steps: 0,
            total_time: 0.0,
            total_cost: 0.0,
        });
    }

    let mut scratch = Vec::with_capacity(features.dim());
    let mut x = sim.state().0.clone();
    let mut action = {
        let model = ValueModel::new(features, &learner.w)?;
        let st = sim.state().0.clone();
        sampler.sample(Some(&model), &st, sim.actions_rng())?
    };
    let mut window = Window::new();
    let mut checkpoints = options.checkpoints.clone();
    checkpoints.sort_unstable();
    let mut next_cp = checkpoints.into_iter().peekable();

    for _ in 0..horizon {
        x.copy_from_slice(sim.state().as_slice());
        let (event, dt) = sim.step(action)?;
        let c = cost.one_step(sim.state(), dt);
        let a_next = {
            let model = ValueModel {
                features,
                w: &learner.w,
            };
            let next = sim.state().0.clone();
            sampler.sample(Some(&model), &next, sim.actions_rng())?
        };
        let b = sgs_step(
            &mut learner,
            features,
            &Transition {
                x: &x,
                a: action,
                cost: c,
                x_next: sim.state().as_slice(),
                a_next,
            },
            &mut scratch,
        )?;
        if b > 1.0 {
            outcome_counts.0 += 1;
        }
        let max_abs = learner.max_abs_weight();
        if !(max_abs <= divergence_ceiling) {
            return Err(Error::Divergence {
                epoch: learner.k,
                max_abs,
                ceiling: divergence_ceiling,
                weights: learner.w.clone(),
            });
        }
        if let Some(t) = trajectory.as_mut() {
            t.push(&x, action, event, dt, c);
        }
        let q_len: u64 = x.iter().map(|&v| v as u64).sum();
        window.cost += c;
        window.time += dt;
        window.q_area += q_len as f64 * dt;
        window.b_max = window.b_max.max(b);
        outcome_counts.1 += dt;
        outcome_counts.2 += c;
        action = a_next;

        let k = learner.k;
        let mut due = options.snapshot_every > 0 && k % options.snapshot_every == 0;
        while next_cp.peek().is_some_and(|&cp| cp <= k) {
            if next_cp.next() == Some(k) {
                due = true;
            }
        }
        if due || k == horizon {
            let snap = Snapshot {
                k,
                w: learner.w.clone(),
                window_cost: ratio(window.cost, window.time),
                window_q_len: ratio(window.q_area, window.time),
                b_alpha_max: window.b_max,
                min_highest_weight: learner.min_highest_weight(),
            };
            sink(&snap);
            trace.push(snap);
            window = Window::new();
        }
    }
    if let Some(t) = trajectory.as_mut() {
        t.final_state = sim.state().clone();
    }
    Ok(TrainOutcome {
        learner,
        trace,
        trajectory,
        restrained_steps: outcome_counts.0,
        total_time: outcome_counts.1,
        total_cost: outcome_counts.2,
    })
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}
