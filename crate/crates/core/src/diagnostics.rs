//! Stability machinery: the Lyapunov function W_e(x) = Σ_n exp(ν·w_nᵀφ_n(x_n)),
//! its one-step drift under the softmax policy, a ν search certifying
//! negative drift on a finite annulus, and trajectory monitors.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Features;
use crate::learner::Snapshot;
use crate::oracle::TruncatedMdp;
use crate::policy::{action_probabilities, fill_softmax, PolicyParams, ValueModel};
use crate::queueing::{total_rate, State, SystemConfig, Trajectory};

/// Exponents above this are treated as overflow.
pub const EXP_LIMIT: f64 = 700.0;

/// Streaming log Σ e^{e_i}; also returns the largest exponent.
fn log_sum_exp(exponents: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut max, mut sum) = (f64::NEG_INFINITY, 0.0);
    for e in exponents {
        if e > max {
            sum = sum * (max - e).exp() + 1.0;
            max = e;
        } else {
            sum += (e - max).exp();
        }
    }
    if !max.is_finite() {
        return (max, max);
    }
    (max + sum.ln(), max)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LyapunovValue {
    /// W_e(x), or +∞ when `overflow` is set.
    pub value: f64,
    pub log_value: f64,
    pub overflow: bool,
}

fn check_weights(features: &Features, w: &[f64], x: &[u32]) -> Result<()> {
    if w.len() != features.dim() {
        return Err(Error::arg(format!("weights have length {}, basis needs {}", w.len(), features.dim())));
    }
    if x.len() != features.n_servers() {
        return Err(Error::arg(format!("state has {} entries, basis has {} servers", x.len(), features.n_servers())));
    }
    Ok(())
}

pub fn lyapunov_value(features: &Features, w: &[f64], nu: f64, state: &[u32]) -> Result<LyapunovValue> {
    if !(nu > 0.0) {
        return Err(Error::arg("nu must be positive"));
    }
    check_weights(features, w, state)?;
    let (log_value, max) = log_sum_exp((0..state.len()).map(|n| nu * features.server_value(w, n, state[n] as u64)));
    if max > EXP_LIMIT {
        return Ok(LyapunovValue {
            value: f64::INFINITY,
            log_value,
            overflow: true,
        });
    }
    let value = (0..state.len())
        .map(|n| (nu * features.server_value(w, n, state[n] as u64)).exp())
        .sum();
    Ok(LyapunovValue {
        value,
        log_value,
        overflow: false,
    })
}

/// L_w f(x) = Σ_a π(a|x) Σ_{x′} p(x′|x,a)·(f(x′) − f(x)) for an arbitrary test function.
pub fn drift_operator(
    config: &SystemConfig,
    policy: &PolicyParams,
    model: Option<&ValueModel<'_>>,
    state: &State,
    f: impl Fn(&[u32]) -> f64,
) -> Result<f64> {
    let probs = action_probabilities(policy, model, state)?;
    let rate = total_rate(config, state);
    let here = f(state.as_slice());
    let mut next = state.0.clone();
    let mut out = 0.0;
    for (a, pa) in probs.iter().enumerate() {
        next[a] += 1;
        out += pa * config.lambda / rate * (f(&next) - here);
        next[a] -= 1;
    }
    for (n, mu) in config.mu.iter().enumerate() {
        if state.0[n] > 0 {
            next[n] -= 1;
            out += mu / rate * (f(&next) - here);
            next[n] += 1;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DriftValue {
    /// L_w W_e(x); ±∞ when W_e overflows on the one-step neighbourhood.
    pub drift: f64,
    /// L_w W_e(x) / W_e(x), computed in log space; same sign as `drift`.
    pub relative: f64,
    pub overflow: bool,
}

/// Per-server tables of w_nᵀφ_n(x) and w_nᵀφ_{n+}(x) for x ≤ `cap`.
struct ServerTables {
    value: Vec<Vec<f64>>,
}

impl ServerTables {
    fn new(features: &Features, w: &[f64], cap: u32) -> Self {
        let value = (0..features.n_servers())
            .map(|n| (0..=cap as u64 + 1).map(|x| features.server_value(w, n, x)).collect())
            .collect();
        ServerTables { value }
    }

    #[inline]
    fn f(&self, n: usize, x: u32) -> f64 {
        self.value[n][x as usize]
    }
}

struct DriftEval<'a> {
    config: &'a SystemConfig,
    model: ValueModel<'a>,
    iota: f64,
    nu: f64,
    tables: ServerTables,
    /// exp(ν·w_nᵀφ_n(x)), present when every exponent is within ±FAST_LIMIT.
    exp: Option<Vec<Vec<f64>>>,
}

/// Exponent bound for the table path; ratios of two entries stay finite.
const FAST_LIMIT: f64 = 300.0;

impl<'a> DriftEval<'a> {
    fn new(config: &'a SystemConfig, model: ValueModel<'a>, iota: f64, nu: f64, tables: ServerTables) -> Self {
        let fits = tables.value.iter().flatten().all(|v| (nu * v).abs() <= FAST_LIMIT);
        let exp = fits.then(|| {
            tables
                .value
                .iter()
                .map(|row| row.iter().map(|v| (nu * v).exp()).collect())
                .collect()
        });
        DriftEval {
            config,
            model,
            iota,
            nu,
            tables,
            exp,
        }
    }

    /// −L_w W_e(x) / g(x) given the relative drift at x.
    fn b_e(&self, x: &[u32], relative: f64) -> f64 {
        match &self.exp {
            Some(e) => {
                let w: f64 = x.iter().enumerate().map(|(n, &v)| e[n][v as usize]).sum();
                let g: f64 = x
                    .iter()
                    .enumerate()
                    .map(|(n, &v)| e[n][v as usize + 1] / e[n][v as usize])
                    .sum();
                -relative * w / g
            }
            None => {
                let (lw, _) = self.log_w(x);
                let (lg, _) = log_sum_exp(
                    (0..x.len()).map(|i| self.nu * (self.tables.f(i, x[i] + 1) - self.tables.f(i, x[i]))),
                );
                -relative * (lw - lg).exp()
            }
        }
    }

    fn eval_table(&self, e: &[Vec<f64>], x: &[u32], probs: &[f64], rate: f64) -> DriftValue {
        let w0: f64 = x.iter().enumerate().map(|(n, &v)| e[n][v as usize]).sum();
        let mut drift = 0.0;
        for (a, &v) in x.iter().enumerate() {
            let v = v as usize;
            drift += probs[a] * self.config.lambda / rate * (e[a][v + 1] - e[a][v]);
            if v > 0 {
                drift += self.config.mu[a] / rate * (e[a][v - 1] - e[a][v]);
            }
        }
        DriftValue {
            drift,
            relative: drift / w0,
            overflow: false,
        }
    }
    fn log_w(&self, x: &[u32]) -> (f64, f64) {
        log_sum_exp(x.iter().enumerate().map(|(n, &v)| self.nu * self.tables.f(n, v)))
    }

    fn rate(&self, x: &[u32]) -> f64 {
        self.config.lambda
            + x.iter()
                .zip(&self.config.mu)
                .filter(|(&v, _)| v > 0)
                .map(|(_, m)| m)
                .sum::<f64>()
    }

    fn eval(&self, x: &[u32], probs: &mut [f64]) -> Result<DriftValue> {
        fill_softmax(&self.model, x, self.iota, probs)?;
        let rate = self.rate(x);
        Ok(self.eval_given(x, probs, rate))
    }

    /// Drift at x given π_w(·|x) and the total event rate.
    fn eval_given(&self, x: &[u32], probs: &[f64], rate: f64) -> DriftValue {
        if let Some(e) = &self.exp {
            return self.eval_table(e, x, probs, rate);
        }
        // Each neighbour changes one term: W′ − W = e^{t_a}·expm1(t′_a − t_a).
        let (l0, mut max_exp) = self.log_w(x);
        let mut relative = 0.0;
        for (a, &v) in x.iter().enumerate() {
            let t = self.nu * self.tables.f(a, v);
            let share = (t - l0).exp();
            let up = self.nu * self.tables.f(a, v + 1);
            max_exp = max_exp.max(up);
            relative += probs[a] * self.config.lambda / rate * share * (up - t).exp_m1();
            if v > 0 {
                let down = self.nu * self.tables.f(a, v - 1);
                max_exp = max_exp.max(down);
                relative += self.config.mu[a] / rate * share * (down - t).exp_m1();
            }
        }
        if max_exp > EXP_LIMIT {
            let drift = if relative > 0.0 {
                f64::INFINITY
            } else if relative < 0.0 {
                f64::NEG_INFINITY
            } else {
                0.0
            };
            return DriftValue {
                drift,
                relative,
                overflow: true,
            };
        }
        DriftValue {
            drift: relative * l0.exp(),
            relative,
            overflow: false,
        }
    }
}

/// L_w W_e(x) under the softmax policy π_w with temperature `iota`, by exact
/// enumeration of the one-step kernel.
pub fn drift(config: &SystemConfig, features: &Features, w: &[f64], iota: f64, nu: f64, state: &State) -> Result<DriftValue> {
    config.validate()?;
    if !(nu > 0.0) {
        return Err(Error::arg("nu must be positive"));
    }
    check_weights(features, w, state.as_slice())?;
    PolicyParams::Softmax { iota }.validate(config.n_servers())?;
    let cap = state.0.iter().copied().max().unwrap_or(0) + 1;
    let eval = DriftEval::new(config, ValueModel::new(features, w)?, iota, nu, ServerTables::new(features, w, cap));
    let mut x = state.0.clone();
    let mut probs = vec![0.0; x.len()];
    eval.eval(&mut x, &mut probs)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftOptions {
    /// Inner radius b_l of the annulus, in ‖x‖₁.
    pub b_l: u32,
    /// Outer radius of the annulus, in ‖x‖₁.
    pub x_check: u32,
    /// Grid ν_i = nu_base·2^i for i < grid_len.
    pub nu_base: f64,
    pub grid_len: u32,
}

impl Default for DriftOptions {
    fn default() -> Self {
        DriftOptions {
            b_l: 20,
            x_check: 200,
            nu_base: 1e-4,
            grid_len: 24,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NuAttempt {
    pub nu: f64,
    pub max_drift: f64,
    pub max_relative_drift: f64,
    pub worst_state: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DriftReport {
    pub nu: f64,
    pub checked_range: (u32, u32),
    pub states_checked: u64,
    /// max L_w W_e over the annulus at `nu`.
    pub max_drift_outside: f64,
    pub max_relative_drift: f64,
    pub worst_state: Vec<u32>,
    /// States whose neighbourhood overflowed W_e; their sign comes from the
    /// log-space relative drift.
    pub overflow_states: u64,
    /// L_w W_e(0) + 1.
    pub b_w_est: f64,
    /// min over the annulus of −L_w W_e(x) / g(x). Positive when the
    /// certificate passes; the constant 1 in the drift bound is recovered by
    /// rescaling W_e.
    pub b_e_est: f64,
    pub pass: bool,
    pub attempts: Vec<NuAttempt>,
}

struct ScanResult {
    max_drift: f64,
    max_relative: f64,
    worst_state: Vec<u32>,
    states: u64,
    overflow: u64,
    b_e: f64,
}

fn merge(a: ScanResult, b: ScanResult) -> ScanResult {
    // Ties resolve to the lexicographically smaller state for determinism.
    let pick_b = b.max_relative > a.max_relative || (b.max_relative == a.max_relative && b.worst_state < a.worst_state);
    let (max_relative, worst_state) = if pick_b {
        (b.max_relative, b.worst_state)
    } else {
        (a.max_relative, a.worst_state)
    };
    ScanResult {
        max_drift: a.max_drift.max(b.max_drift),
        max_relative,
        worst_state,
        states: a.states + b.states,
        overflow: a.overflow + b.overflow,
        b_e: a.b_e.min(b.b_e),
    }
}

fn empty_scan() -> ScanResult {
    ScanResult {
        max_drift: f64::NEG_INFINITY,
        max_relative: f64::NEG_INFINITY,
        worst_state: Vec::new(),
        states: 0,
        overflow: 0,
        b_e: f64::INFINITY,
    }
}

/// Visits every x ∈ ℤ_{≥0}^N with lo ≤ ‖x‖₁ ≤ hi whose first coordinate is `first`.
fn for_each_with_first(n: usize, first: u32, lo: u32, hi: u32, mut visit: impl FnMut(&mut [u32])) {
    let mut x = vec![0u32; n];
    x[0] = first;
    fn rec(x: &mut Vec<u32>, i: usize, sum: u32, lo: u32, hi: u32, visit: &mut dyn FnMut(&mut [u32])) {
        if i == x.len() {
            if sum >= lo {
                visit(x);
            }
            return;
        }
        for v in 0..=(hi - sum) {
            x[i] = v;
            rec(x, i + 1, sum + v, lo, hi, visit);
        }
        x[i] = 0;
    }
    if first > hi {
        return;
    }
    rec(&mut x, 1, first, lo, hi, &mut visit);
}

/// Annulus states with their action probabilities and total rates, which
/// do not depend on ν.
struct Annulus {
    n: usize,
    states: Vec<u32>,
    probs: Vec<f64>,
    rates: Vec<f64>,
}

/// States beyond this make the drift search impractical.
pub const MAX_ANNULUS_STATES: f64 = 5e7;

fn annulus_size(n: usize, lo: u32, hi: u32) -> f64 {
    // #{x ∈ ℤ_{≥0}^N : ‖x‖₁ ≤ m} = C(m + N, N).
    let ball = |m: f64| (1..=n).map(|i| (m + i as f64) / i as f64).product::<f64>();
    ball(hi as f64) - if lo == 0 { 0.0 } else { ball(lo as f64 - 1.0) }
}

fn build_annulus(eval: &DriftEval<'_>, opts: &DriftOptions) -> Result<Annulus> {
    let n = eval.config.n_servers();
    let size = annulus_size(n, opts.b_l, opts.x_check);
    if size > MAX_ANNULUS_STATES {
        return Err(Error::arg(format!(
            "drift annulus holds about {size:e} states (limit {MAX_ANNULUS_STATES:e}); shrink x_check"
        )));
    }
    let parts: Vec<Result<Annulus>> = (0..=opts.x_check)
        .into_par_iter()
        .map(|first| {
            let mut part = Annulus {
                n,
                states: Vec::new(),
                probs: Vec::new(),
                rates: Vec::new(),
            };
            let mut probs = vec![0.0; n];
            let mut err = None;
            for_each_with_first(n, first, opts.b_l, opts.x_check, |x| {
                if err.is_some() {
                    return;
                }
                match fill_softmax(&eval.model, x, eval.iota, &mut probs) {
                    Ok(()) => {
                        part.states.extend_from_slice(x);
                        part.probs.extend_from_slice(&probs);
                        part.rates.push(eval.rate(x));
                    }
                    Err(e) => err = Some(e),
                }
            });
            match err {
                Some(e) => Err(e),
                None => Ok(part),
            }
        })
        .collect();
    let mut all = Annulus {
        n,
        states: Vec::with_capacity(size as usize * n),
        probs: Vec::with_capacity(size as usize * n),
        rates: Vec::with_capacity(size as usize),
    };
    for p in parts {
        let p = p?;
        all.states.extend(p.states);
        all.probs.extend(p.probs);
        all.rates.extend(p.rates);
    }
    Ok(all)
}

fn scan(eval: &DriftEval<'_>, annulus: &Annulus) -> ScanResult {
    let n = annulus.n;
    const CHUNK: usize = 4096;
    let parts: Vec<ScanResult> = annulus
        .rates
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, rates)| {
            let mut acc = empty_scan();
            let mut x = vec![0u32; n];
            for (i, &rate) in rates.iter().enumerate() {
                let s = c * CHUNK + i;
                x.copy_from_slice(&annulus.states[s * n..(s + 1) * n]);
                let d = eval.eval_given(&mut x, &annulus.probs[s * n..(s + 1) * n], rate);
                acc.states += 1;
                if d.overflow {
                    acc.overflow += 1;
                }
                acc.max_drift = acc.max_drift.max(d.drift);
                if d.relative > acc.max_relative || (d.relative == acc.max_relative && *x < *acc.worst_state) {
                    acc.max_relative = d.relative;
                    acc.worst_state = x.clone();
                }
                acc.b_e = acc.b_e.min(eval.b_e(&x, d.relative));
            }
            acc
        })
        .collect();
    parts.into_iter().fold(empty_scan(), merge)
}

/// Searches ν over the grid `nu_base·2^i` for one at which L_w W_e < 0 on
/// every state with b_l ≤ ‖x‖₁ ≤ x_check. Stabilizability is not assumed:
/// a non-stabilizable system simply fails at every grid point.
pub fn find_nu(config: &SystemConfig, features: &Features, w: &[f64], iota: f64, opts: &DriftOptions) -> Result<DriftReport> {
    config.validate()?;
    if w.len() != features.dim() || features.n_servers() != config.n_servers() {
        return Err(Error::arg("weights, basis and system disagree on dimensions"));
    }
    if opts.b_l > opts.x_check || opts.grid_len == 0 || !(opts.nu_base > 0.0) {
        return Err(Error::arg("drift search needs b_l ≤ x_check, a positive base and a non-empty grid"));
    }
    PolicyParams::Softmax { iota }.validate(config.n_servers())?;
    let n = config.n_servers();
    let tables = ServerTables::new(features, w, opts.x_check + 1);
    let annulus = {
        let probe = DriftEval::new(config, ValueModel::new(features, w)?, iota, opts.nu_base, ServerTables { value: tables.value.clone() });
        build_annulus(&probe, opts)?
    };
    let mut attempts = Vec::new();
    let mut best: Option<(f64, ScanResult)> = None;
    for i in 0..opts.grid_len {
        let nu = opts.nu_base * 2f64.powi(i as i32);
        let eval = DriftEval::new(
            config,
            ValueModel::new(features, w)?,
            iota,
            nu,
            ServerTables { value: tables.value.clone() },
        );
        let s = scan(&eval, &annulus);
        attempts.push(NuAttempt {
            nu,
            max_drift: s.max_drift,
            max_relative_drift: s.max_relative,
            worst_state: s.worst_state.clone(),
        });
        let pass = s.max_relative < 0.0;
        let better = best.as_ref().is_none_or(|(_, b)| s.max_relative < b.max_relative);
        if pass || better {
            best = Some((nu, s));
        }
        if pass {
            break;
        }
    }
    let (nu, s) = best.expect("grid is non-empty");
    let zero = DriftEval::new(config, ValueModel::new(features, w)?, iota, nu, tables);
    let mut x0 = vec![0u32; n];
    let mut probs = vec![0.0; n];
    let at_zero = zero.eval(&mut x0, &mut probs)?;
    let pass = s.max_relative < 0.0;
    Ok(DriftReport {
        nu,
        checked_range: (opts.b_l, opts.x_check),
        states_checked: s.states,
        max_drift_outside: s.max_drift,
        max_relative_drift: s.max_relative,
        worst_state: s.worst_state,
        overflow_states: s.overflow,
        b_w_est: at_zero.drift + 1.0,
        b_e_est: s.b_e,
        pass,
        attempts,
    })
}

/// g(x) = Σ_n exp(ν·w_nᵀφ_{n+}(x_n)); `None` on overflow.
pub fn mgf_value(features: &Features, w: &[f64], nu: f64, x: &[u32]) -> Option<f64> {
    let mut total = 0.0;
    for (n, &v) in x.iter().enumerate() {
        let e = nu * features.server_increment(w, n, v as u64);
        if e > EXP_LIMIT {
            return None;
        }
        total += e.exp();
    }
    Some(total)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MgfSeries {
    /// Running mean of g(x[k]) over epochs 0..=k.
    pub running: Vec<f64>,
    /// First epoch whose g overflowed; the series stops before it.
    pub overflow_at: Option<u64>,
}

impl MgfSeries {
    pub fn final_value(&self) -> Option<f64> {
        self.running.last().copied()
    }

    /// |m_end − m_mid| / |m_end| between the midpoint and the end.
    pub fn final_half_drift(&self) -> Option<f64> {
        let end = *self.running.last()?;
        let mid = self.running[self.running.len() / 2];
        Some((end - mid).abs() / end.abs())
    }
}

pub fn mgf_time_average(trajectory: &Trajectory, features: &Features, w: &[f64], nu: f64) -> Result<MgfSeries> {
    if trajectory.is_empty() {
        return Err(Error::arg("trajectory is empty"));
    }
    if !(nu > 0.0) {
        return Err(Error::arg("nu must be positive"));
    }
    check_weights(features, w, trajectory.state(0))?;
    let mut running = Vec::with_capacity(trajectory.len());
    let mut sum = 0.0;
    for k in 0..trajectory.len() {
        match mgf_value(features, w, nu, trajectory.state(k)) {
            Some(g) => {
                sum += g;
                running.push(sum / (k + 1) as f64);
            }
            None => {
                return Ok(MgfSeries {
                    running,
                    overflow_at: Some(k as u64),
                })
            }
        }
    }
    Ok(MgfSeries {
        running,
        overflow_at: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WindowStat {
    pub index: usize,
    pub start_epoch: u64,
    pub epochs: u64,
    pub time: f64,
    /// Holding-time weighted mean of ‖x‖₁ over the window.
    pub mean_queue: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StabilityMetrics {
    pub windows: Vec<WindowStat>,
    /// (1/t)∫‖x(s)‖₁ ds over the whole trajectory.
    pub time_average_queue: f64,
    pub total_time: f64,
}

impl StabilityMetrics {
    /// Relative change of the last window mean against the one before it.
    pub fn last_window_change(&self) -> Option<f64> {
        let n = self.windows.len();
        if n < 2 {
            return None;
        }
        let (prev, last) = (self.windows[n - 2].mean_queue, self.windows[n - 1].mean_queue);
        Some((last - prev).abs() / prev.abs().max(f64::MIN_POSITIVE))
    }
}

pub fn stability_metrics(trajectory: &Trajectory, window: u64) -> Result<StabilityMetrics> {
    if window == 0 {
        return Err(Error::arg("window must be at least 1"));
    }
    let mut windows = Vec::new();
    let (mut area, mut time) = (0.0, 0.0);
    let (mut w_area, mut w_time, mut w_epochs, mut w_start) = (0.0, 0.0, 0u64, 0u64);
    for k in 0..trajectory.len() {
        let q: u64 = trajectory.state(k).iter().map(|&v| v as u64).sum();
        let dt = trajectory.dts[k];
        area += q as f64 * dt;
        time += dt;
        w_area += q as f64 * dt;
        w_time += dt;
        w_epochs += 1;
        if w_epochs == window || k + 1 == trajectory.len() {
            windows.push(WindowStat {
                index: windows.len(),
                start_epoch: w_start,
                epochs: w_epochs,
                time: w_time,
                mean_queue: if w_time > 0.0 { w_area / w_time } else { 0.0 },
            });
            w_start = k as u64 + 1;
            (w_area, w_time, w_epochs) = (0.0, 0.0, 0);
        }
    }
    Ok(StabilityMetrics {
        windows,
        time_average_queue: if time > 0.0 { area / time } else { 0.0 },
        total_time: time,
    })
}

fn histogram<'a>(trajectory: &'a Trajectory, range: std::ops::Range<usize>) -> HashMap<&'a [u32], f64> {
    let mut h = HashMap::new();
    let total = range.len() as f64;
    for k in range {
        *h.entry(trajectory.state(k)).or_insert(0.0) += 1.0 / total;
    }
    h
}

fn tv(a: &HashMap<&[u32], f64>, b: &HashMap<&[u32], f64>) -> f64 {
    let mut s = 0.0;
    for (k, pa) in a {
        s += (pa - b.get(k).copied().unwrap_or(0.0)).abs();
    }
    for (k, pb) in b {
        if !a.contains_key(k) {
            s += pb;
        }
    }
    (0.5 * s).min(1.0)
}

pub const MIN_TV_WINDOW: usize = 1000;

/// ½‖h_i − h_{i+1}‖₁ between empirical state histograms of consecutive
/// non-overlapping windows; a trailing partial window is dropped.
pub fn tv_window_distance(trajectory: &Trajectory, window: usize) -> Result<Vec<f64>> {
    if window < MIN_TV_WINDOW {
        return Err(Error::arg(format!("window must be at least {MIN_TV_WINDOW} epochs")));
    }
    let count = trajectory.len() / window;
    let hists: Vec<_> = (0..count).map(|i| histogram(trajectory, i * window..(i + 1) * window)).collect();
    Ok(hists.windows(2).map(|p| tv(&p[0], &p[1])).collect())
}

/// ½‖h − d‖₁ between the empirical histogram of epochs `from..` and a
/// distribution on the truncated grid; mass beyond the cap counts in full.
pub fn tv_to_reference(trajectory: &Trajectory, from: usize, mdp: &TruncatedMdp, d: &[f64]) -> Result<f64> {
    if from >= trajectory.len() {
        return Err(Error::arg("reference window is empty"));
    }
    if d.len() != mdp.n_states() || trajectory.n_servers != mdp.n_servers() {
        return Err(Error::arg("reference distribution does not match the truncated MDP"));
    }
    let h = histogram(trajectory, from..trajectory.len());
    let mut seen = vec![false; d.len()];
    let mut s = 0.0;
    for (x, p) in &h {
        match mdp.index_of(x) {
            Some(i) => {
                seen[i] = true;
                s += (p - d[i]).abs();
            }
            None => s += p,
        }
    }
    s += d.iter().zip(&seen).filter(|(_, &v)| !v).map(|(p, _)| p).sum::<f64>();
    Ok((0.5 * s).min(1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WeightConvergence {
    pub ks: Vec<u64>,
    pub distances: Vec<f64>,
    /// b in ‖w[k] − w*‖ ≈ A·e^{−b·k}, fitted from the first snapshot to the
    /// closest one.
    pub decay_rate: Option<f64>,
}

impl WeightConvergence {
    pub fn is_non_increasing(&self) -> bool {
        self.distances.windows(2).all(|p| p[1] <= p[0])
    }
}

pub fn weight_convergence(trace: &[Snapshot], target: &[f64]) -> Result<WeightConvergence> {
    let pairs: Vec<(u64, &[f64])> = trace.iter().map(|s| (s.k, s.w.as_slice())).collect();
    weight_distances(&pairs, target)
}

pub fn weight_distances(trace: &[(u64, &[f64])], target: &[f64]) -> Result<WeightConvergence> {
    let mut ks = Vec::with_capacity(trace.len());
    let mut distances = Vec::with_capacity(trace.len());
    for (k, w) in trace {
        if w.len() != target.len() {
            return Err(Error::arg(format!("snapshot at k = {k} has length {}, target {}", w.len(), target.len())));
        }
        ks.push(*k);
        distances.push(w.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt());
    }
    let end = distances
        .iter()
        .enumerate()
        .fold(None, |acc: Option<(usize, f64)>, (i, &d)| match acc {
            Some((_, best)) if best <= d => acc,
            _ => Some((i, d)),
        })
        .map(|(i, _)| i);
    let decay_rate = end.and_then(|end| {
        let pts: Vec<(f64, f64)> = (0..=end)
            .filter(|&i| distances[i] > 0.0)
            .map(|i| (ks[i] as f64, distances[i].ln()))
            .collect();
        if pts.len() < 2 {
            return None;
        }
        let m = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        (sxx > 0.0).then(|| -sxy / sxx)
    });
    Ok(WeightConvergence {
        ks,
        distances,
        decay_rate,
    })
}
