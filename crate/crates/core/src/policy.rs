//! Routing policies: Boltzmann over Q̂, its greedy limit, join-the-shortest-
//! queue and state-independent Bernoulli splitting.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Features;
use crate::queueing::State;
use crate::rng::SimRng;

pub const DEFAULT_TEMPERATURE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicyParams {
    Softmax { iota: f64 },
    Greedy,
    Jsq,
    Bernoulli { p: Vec<f64> },
}

impl Default for PolicyParams {
    fn default() -> Self {
        PolicyParams::Softmax {
            iota: DEFAULT_TEMPERATURE,
        }
    }
}

impl PolicyParams {
    pub fn validate(&self, n_servers: usize) -> Result<()> {
        match self {
            PolicyParams::Softmax { iota } if !(iota.is_finite() && *iota > 0.0) => {
                Err(Error::arg(format!("temperature must be positive, got {iota}")))
            }
            PolicyParams::Bernoulli { p } => {
                if p.len() != n_servers {
                    return Err(Error::arg(format!(
                        "Bernoulli split has {} entries for {n_servers} servers",
                        p.len()
                    )));
                }
                if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                    return Err(Error::arg("Bernoulli split entries must be non-negative"));
                }
                if (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(Error::arg("Bernoulli split must sum to 1"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Whether the policy reads Q̂.
    pub fn needs_weights(&self) -> bool {
        matches!(self, PolicyParams::Softmax { .. } | PolicyParams::Greedy)
    }

    pub fn name(&self) -> &'static str {
        match self {
            PolicyParams::Softmax { .. } => "softmax",
            PolicyParams::Greedy => "greedy",
            PolicyParams::Jsq => "jsq",
            PolicyParams::Bernoulli { .. } => "bernoulli",
        }
    }
}

/// Q̂-backed policies need the compiled basis and a weight vector.
#[derive(Clone, Copy, Debug)]
pub struct ValueModel<'a> {
    pub features: &'a Features,
    pub w: &'a [f64],
}

impl<'a> ValueModel<'a> {
    pub fn new(features: &'a Features, w: &'a [f64]) -> Result<Self> {
        if w.len() != features.dim() {
            return Err(Error::arg(format!(
                "weight vector has length {}, basis needs {}",
                w.len(),
                features.dim()
            )));
        }
        Ok(ValueModel { features, w })
    }

    /// Action-dependent part of Q̂(x, a): w_aᵀφ_{a+}(x_a).
    #[inline]
    pub fn score(&self, x: &[u32], a: usize) -> f64 {
        self.features.server_increment(self.w, a, x[a] as u64)
    }
}

fn argmin_by<F: Fn(usize) -> f64>(n: usize, f: F) -> usize {
    let mut best = 0;
    let mut best_v = f(0);
    for a in 1..n {
        let v = f(a);
        if v < best_v {
            best = a;
            best_v = v;
        }
    }
    best
}

pub fn jsq_action(x: &[u32]) -> usize {
    argmin_by(x.len(), |a| x[a] as f64)
}

/// Boltzmann weights exp(−Q̂/ι), computed on Q̂ differences so that only
/// w_aᵀφ_{a+}(x_a) enters. Entries are floored at the smallest normal
/// double so every action keeps positive mass.
pub(crate) fn fill_softmax(model: &ValueModel<'_>, x: &[u32], iota: f64, out: &mut [f64]) -> Result<()> {
    let n = x.len();
    let mut min = f64::INFINITY;
    for (a, o) in out.iter_mut().enumerate().take(n) {
        let s = model.score(x, a);
        if !s.is_finite() {
            return Err(Error::Numeric(format!("Q̂ score for action {a} at {x:?} is {s}")));
        }
        *o = s;
        min = min.min(s);
    }
    let mut total = 0.0;
    for o in out.iter_mut().take(n) {
        *o = (-(*o - min) / iota).exp();
        total += *o;
    }
    for o in out.iter_mut().take(n) {
        *o = (*o / total).max(f64::MIN_POSITIVE);
    }
    Ok(())
}

fn fill_probabilities(
    policy: &PolicyParams,
    model: Option<&ValueModel<'_>>,
    x: &[u32],
    out: &mut [f64],
) -> Result<()> {
    let n = x.len();
    let need = || Error::arg(format!("{} policy needs a weight vector", policy.name()));
    match policy {
        PolicyParams::Softmax { iota } => fill_softmax(model.ok_or_else(need)?, x, *iota, out)?,
        PolicyParams::Greedy => {
            let m = model.ok_or_else(need)?;
            let a = argmin_by(n, |a| m.score(x, a));
            out.iter_mut().take(n).for_each(|o| *o = 0.0);
            out[a] = 1.0;
        }
        PolicyParams::Jsq => {
            let a = jsq_action(x);
            out.iter_mut().take(n).for_each(|o| *o = 0.0);
            out[a] = 1.0;
        }
        PolicyParams::Bernoulli { p } => out[..n].copy_from_slice(&p[..n]),
    }
    Ok(())
}

/// π(·|x) as a probability vector over servers.
pub fn action_probabilities(policy: &PolicyParams, model: Option<&ValueModel<'_>>, state: &State) -> Result<Vec<f64>> {
    policy.validate(state.len())?;
    let mut out = vec![0.0; state.len()];
    fill_probabilities(policy, model, state.as_slice(), &mut out)?;
    Ok(out)
}

fn draw(probs: &[f64], rng: &mut SimRng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (a, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = a;
            if u < acc {
                return a;
            }
        }
    }
    last
}

/// Draws an action; deterministic policies do not consume randomness.
pub fn sample_action(
    policy: &PolicyParams,
    model: Option<&ValueModel<'_>>,
    state: &State,
    rng: &mut SimRng,
) -> Result<usize> {
    let mut sampler = ActionSampler::new(policy.clone(), state.len());
    sampler.sample(model, state.as_slice(), rng)
}

/// Allocation-free sampler for hot loops.
#[derive(Clone, Debug)]
pub struct ActionSampler {
    policy: PolicyParams,
    scratch: Vec<f64>,
}

impl ActionSampler {
    pub fn new(policy: PolicyParams, n_servers: usize) -> Self {
        ActionSampler {
            policy,
            scratch: vec![0.0; n_servers],
        }
    }

    pub fn policy(&self) -> &PolicyParams {
        &self.policy
    }

    pub fn sample(&mut self, model: Option<&ValueModel<'_>>, x: &[u32], rng: &mut SimRng) -> Result<usize> {
        match &self.policy {
            PolicyParams::Jsq => Ok(jsq_action(x)),
            PolicyParams::Greedy => {
                let m = model.ok_or_else(|| Error::arg("greedy policy needs a weight vector"))?;
                Ok(argmin_by(x.len(), |a| m.score(x, a)))
            }
            _ => {
                fill_probabilities(&self.policy, model, x, &mut self.scratch)?;
                Ok(draw(&self.scratch, rng))
            }
        }
    }
}

/// max over sampled (x, a) of |π_w(a|x) − π_w′(a|x)| / ‖w − w′‖₂: an
/// empirical lower bound on the softmax Lipschitz constant.
pub fn lipschitz_probe(features: &Features, states: &[State], w: &[f64], w_prime: &[f64], iota: f64) -> Result<f64> {
    let dist = w
        .iter()
        .zip(w_prime)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    if w.len() != w_prime.len() {
        return Err(Error::arg("weight vectors differ in length"));
    }
    if dist == 0.0 {
        return Err(Error::arg("lipschitz probe needs w ≠ w′"));
    }
    let policy = PolicyParams::Softmax { iota };
    policy.validate(features.n_servers())?;
    let m1 = ValueModel::new(features, w)?;
    let m2 = ValueModel::new(features, w_prime)?;
    let mut best = 0.0_f64;
    for s in states {
        let p1 = action_probabilities(&policy, Some(&m1), s)?;
        let p2 = action_probabilities(&policy, Some(&m2), s)?;
        for (a, b) in p1.iter().zip(&p2) {
            best = best.max((a - b).abs() / dist);
        }
    }
    Ok(best)
}
