//! Embedded jump chain of N parallel exponential servers fed by one Poisson
//! stream.
//!
//! The chain is observed at transition epochs. At every epoch a routing
//! action is drawn, even when the epoch resolves as a departure, so that an
//! on-policy learner always has the bootstrap pair `(x[k+1], a[k+1])`.

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learner::CostModel;
use crate::rng::{RngStreams, SimRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    /// Poisson arrival rate (jobs/sec).
    pub lambda: f64,
    /// Per-server exponential service rates (jobs/sec).
    pub mu: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl SystemConfig {
    pub fn new(lambda: f64, mu: Vec<f64>, seed: u64) -> Result<Self> {
        let config = SystemConfig { lambda, mu, seed };
        config.validate()?;
        Ok(config)
    }

    /// Three servers with rates (0.5, 2.5, 5) fed at rate 2.
    pub fn three_server_preset() -> Self {
        SystemConfig {
            lambda: 2.0,
            mu: vec![0.5, 2.5, 5.0],
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu.is_empty() {
            return Err(Error::arg("at least one server is required"));
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::arg(format!("lambda must be positive, got {}", self.lambda)));
        }
        if let Some((n, m)) = self
            .mu
            .iter()
            .enumerate()
            .find(|(_, m)| !(m.is_finite() && **m > 0.0))
        {
            return Err(Error::arg(format!("mu[{n}] must be positive, got {m}")));
        }
        Ok(())
    }

    pub fn n_servers(&self) -> usize {
        self.mu.len()
    }

    pub fn total_service(&self) -> f64 {
        self.mu.iter().sum()
    }

    /// Load ratio λ / Σμ.
    pub fn load(&self) -> f64 {
        self.lambda / self.total_service()
    }
}

/// Queue lengths, one per server.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct State(pub Vec<u32>);

impl State {
    pub fn zeros(n: usize) -> Self {
        State(vec![0; n])
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// ‖x‖₁.
    pub fn total(&self) -> u64 {
        self.0.iter().map(|&v| v as u64).sum()
    }

    pub fn with_arrival(&self, server: usize) -> State {
        let mut next = self.clone();
        next.0[server] += 1;
        next
    }

    pub fn with_departure(&self, server: usize) -> State {
        let mut next = self.clone();
        next.0[server] -= 1;
        next
    }
}

impl From<Vec<u32>> for State {
    fn from(v: Vec<u32>) -> Self {
        State(v)
    }
}

impl std::ops::Index<usize> for State {
    type Output = u32;
    fn index(&self, i: usize) -> &u32 {
        &self.0[i]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "server", rename_all = "snake_case")]
pub enum Event {
    Arrival(usize),
    Departure(usize),
    /// Nothing happened during a fixed-length time slice.
    Idle,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransitionSample {
    pub event: Event,
    pub next_state: State,
    pub holding_time: f64,
    pub epoch_index: u64,
}

/// How the time between epochs is produced.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum TimeMode {
    /// Exponential holding time with rate `total_rate(x)`.
    #[default]
    Sampled,
    /// Deterministic holding time `1 / total_rate(x)`.
    Expected,
    /// Uniformized slices of fixed length; an epoch may carry no event.
    FixedStep { step: f64 },
}

/// λ + Σ_n μ_n·1{x_n > 0}.
pub fn total_rate(config: &SystemConfig, state: &State) -> f64 {
    config.lambda
        + config
            .mu
            .iter()
            .zip(state.as_slice())
            .filter(|(_, &x)| x > 0)
            .map(|(m, _)| m)
            .sum::<f64>()
}

fn check_action(config: &SystemConfig, action: usize) -> Result<()> {
    if action >= config.n_servers() {
        return Err(Error::arg(format!(
            "action {action} out of range for {} servers",
            config.n_servers()
        )));
    }
    Ok(())
}

fn check_state(config: &SystemConfig, state: &State) -> Result<()> {
    if state.len() != config.n_servers() {
        return Err(Error::arg(format!(
            "state has {} queues, config has {} servers",
            state.len(),
            config.n_servers()
        )));
    }
    Ok(())
}

/// One-step kernel p(·|x, a). The arrival entry comes first, then departures
/// in server order; zero-probability entries are omitted.
pub fn transition_distribution(
    config: &SystemConfig,
    state: &State,
    action: usize,
) -> Result<Vec<(State, f64)>> {
    check_action(config, action)?;
    check_state(config, state)?;
    let rate = total_rate(config, state);
    let mut out = Vec::with_capacity(config.n_servers() + 1);
    out.push((state.with_arrival(action), config.lambda / rate));
    for (n, (&mu, &x)) in config.mu.iter().zip(state.as_slice()).enumerate() {
        if x > 0 {
            out.push((state.with_departure(n), mu / rate));
        }
    }
    Ok(out)
}

/// λ < Σ_n μ_n.
pub fn is_stabilizable(config: &SystemConfig) -> bool {
    config.lambda < config.total_service()
}

/// Draws the event at `state` given `action`, without touching the state.
fn draw_event(config: &SystemConfig, state: &[u32], action: usize, rate: f64, rng: &mut SimRng) -> Event {
    let u: f64 = rng.random::<f64>() * rate;
    let mut acc = config.lambda;
    if u < acc {
        return Event::Arrival(action);
    }
    let mut last_busy = None;
    for (n, (&mu, &x)) in config.mu.iter().zip(state).enumerate() {
        if x > 0 {
            acc += mu;
            last_busy = Some(n);
            if u < acc {
                return Event::Departure(n);
            }
        }
    }
    // Rounding at the top of the cumulative sum.
    match last_busy {
        Some(n) => Event::Departure(n),
        None => Event::Arrival(action),
    }
}

fn apply_event(state: &mut [u32], event: Event) {
    match event {
        Event::Arrival(a) => state[a] += 1,
        Event::Departure(n) => state[n] -= 1,
        Event::Idle => {}
    }
}

/// Samples one epoch of the embedded chain with sampled exponential holding
/// time.
pub fn sample_transition(
    config: &SystemConfig,
    state: &State,
    action: usize,
    epoch_index: u64,
    streams: &mut RngStreams,
) -> Result<TransitionSample> {
    check_action(config, action)?;
    check_state(config, state)?;
    let mut next = state.clone();
    let (event, holding_time) = step_in_place(config, &mut next.0, action, TimeMode::Sampled, streams)?;
    Ok(TransitionSample {
        event,
        next_state: next,
        holding_time,
        epoch_index,
    })
}

/// Advances `state` by one epoch and returns the event and the elapsed time.
pub(crate) fn step_in_place(
    config: &SystemConfig,
    state: &mut [u32],
    action: usize,
    mode: TimeMode,
    streams: &mut RngStreams,
) -> Result<(Event, f64)> {
    let rate = config.lambda
        + config
            .mu
            .iter()
            .zip(state.iter())
            .filter(|(_, &x)| x > 0)
            .map(|(m, _)| m)
            .sum::<f64>();
    let (event, dt) = match mode {
        TimeMode::Sampled => {
            let e = draw_event(config, state, action, rate, &mut streams.events);
            let z: f64 = Exp1.sample(&mut streams.holding);
            (e, z / rate)
        }
        TimeMode::Expected => (draw_event(config, state, action, rate, &mut streams.events), 1.0 / rate),
        TimeMode::FixedStep { step } => {
            let fired = rate * step;
            if fired > 1.0 {
                return Err(Error::arg(format!(
                    "fixed step {step} too coarse: rate·step = {fired} > 1"
                )));
            }
            let u: f64 = streams.holding.random();
            if u < fired {
                (draw_event(config, state, action, rate, &mut streams.events), step)
            } else {
                (Event::Idle, step)
            }
        }
    };
    apply_event(state, event);
    Ok((event, dt))
}

/// A stateful driver over the embedded chain.
#[derive(Clone, Debug)]
pub struct Simulator<'a> {
    config: &'a SystemConfig,
    state: State,
    epoch: u64,
    mode: TimeMode,
    streams: RngStreams,
}

impl<'a> Simulator<'a> {
    pub fn new(config: &'a SystemConfig, initial: State, mode: TimeMode, streams: RngStreams) -> Result<Self> {
        config.validate()?;
        check_state(config, &initial)?;
        if let TimeMode::FixedStep { step } = mode {
            if !(step > 0.0) {
                return Err(Error::arg("fixed step must be positive"));
            }
        }
        Ok(Simulator {
            config,
            state: initial,
            epoch: 0,
            mode,
            streams,
        })
    }

    pub fn state(&self) -> &State {
        &self.state
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn config(&self) -> &SystemConfig {
        self.config
    }

    pub fn actions_rng(&mut self) -> &mut SimRng {
        &mut self.streams.actions
    }

    /// Advances one epoch under `action`; returns the event and holding time.
    pub fn step(&mut self, action: usize) -> Result<(Event, f64)> {
        check_action(self.config, action)?;
        let out = step_in_place(self.config, &mut self.state.0, action, self.mode, &mut self.streams)?;
        self.epoch += 1;
        Ok(out)
    }
}

/// Struct-of-arrays trajectory log. Record `k` holds the state *before*
/// epoch `k`, the action drawn there, the resulting event, the holding time
/// spent in that state and the cost charged on arrival in the next state.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Trajectory {
    pub n_servers: usize,
    pub states: Vec<u32>,
    pub actions: Vec<u32>,
    pub events: Vec<Event>,
    pub dts: Vec<f64>,
    pub costs: Vec<f64>,
    pub final_state: State,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryRecord<'t> {
    pub k: u64,
    pub state: &'t [u32],
    pub action: usize,
    pub event: Event,
    pub dt: f64,
    pub cost: f64,
}

impl Trajectory {
    pub fn new(n_servers: usize) -> Self {
        Trajectory {
            n_servers,
            final_state: State::zeros(n_servers),
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn push(&mut self, state: &[u32], action: usize, event: Event, dt: f64, cost: f64) {
        debug_assert_eq!(state.len(), self.n_servers);
        self.states.extend_from_slice(state);
        self.actions.push(action as u32);
        self.events.push(event);
        self.dts.push(dt);
        self.costs.push(cost);
    }

    pub fn state(&self, k: usize) -> &[u32] {
        &self.states[k * self.n_servers..(k + 1) * self.n_servers]
    }

    pub fn record(&self, k: usize) -> TrajectoryRecord<'_> {
        TrajectoryRecord {
            k: k as u64,
            state: self.state(k),
            action: self.actions[k] as usize,
            event: self.events[k],
            dt: self.dts[k],
            cost: self.costs[k],
        }
    }

    pub fn records(&self) -> impl Iterator<Item = TrajectoryRecord<'_>> + '_ {
        (0..self.len()).map(move |k| self.record(k))
    }
}

/// Drives the chain for `horizon` epochs from `initial` under an arbitrary
/// action source.
///
/// The action source is called once per epoch plus once more for the
/// bootstrap action after the last epoch, always with the actions stream.
pub fn simulate_trajectory<F>(
    config: &SystemConfig,
    initial: State,
    mut action_source: F,
    horizon: u64,
    cost: &CostModel,
    mode: TimeMode,
    streams: RngStreams,
) -> Result<Trajectory>
where
    F: FnMut(&State, &mut SimRng) -> usize,
{
    let n = config.n_servers();
    let mut log = Trajectory::new(n);
    let mut sim = Simulator::new(config, initial, mode, streams)?;
    if horizon == 0 {
        log.final_state = sim.state().clone();
        return Ok(log);
    }
    log.states.reserve(horizon as usize * n);
    let mut action = next_action(&mut sim, &mut action_source)?;
    let mut before = sim.state().clone();
    for _ in 0..horizon {
        before.0.copy_from_slice(sim.state().as_slice());
        let (event, dt) = sim.step(action)?;
        let c = cost.one_step(sim.state(), dt);
        log.push(before.as_slice(), action, event, dt, c);
        action = next_action(&mut sim, &mut action_source)?;
    }
    log.final_state = sim.state().clone();
    Ok(log)
}

fn next_action<F>(sim: &mut Simulator<'_>, source: &mut F) -> Result<usize>
where
    F: FnMut(&State, &mut SimRng) -> usize,
{
    let n = sim.config().n_servers();
    let state = sim.state().clone();
    let a = source(&state, sim.actions_rng());
    if a >= n {
        return Err(Error::arg(format!(
            "action source returned {a} at epoch {} in state {:?}; valid range 0..{n}",
            sim.epoch(),
            state.0
        )));
    }
    Ok(a)
}
