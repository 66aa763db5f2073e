//! Per-server basis functions and the linear action-value approximation
//!
//! ```text
//! Q̂(x, a; w) = Σ_n Σ_j w[n,j] · φ[n,j](x_n + 1{n = a})
//! ```
//!
//! Weights and features are laid out server-major: index `n * P + j`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::queueing::{State, SystemConfig};

/// One parametric basis family evaluated on ℤ≥0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BasisFn {
    /// x^p, with 0^p = 0.
    Power { exponent: f64 },
    /// c + x^p.
    AffinePower { constant: f64, exponent: f64 },
    /// ln(x + o), o ≥ 1.
    Log { offset: f64 },
}

impl BasisFn {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            BasisFn::Power { exponent } => exponent.is_finite() && exponent > 0.0,
            BasisFn::AffinePower { constant, exponent } => {
                constant.is_finite() && constant >= 0.0 && exponent.is_finite() && exponent > 0.0
            }
            BasisFn::Log { offset } => offset.is_finite() && offset >= 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::arg(format!("invalid basis function parameters: {self:?}")))
        }
    }

    pub fn value(&self, x: f64) -> f64 {
        match *self {
            BasisFn::Power { exponent } => pow0(x, exponent),
            BasisFn::AffinePower { constant, exponent } => constant + pow0(x, exponent),
            BasisFn::Log { offset } => (x + offset).ln(),
        }
    }

    /// Closed-form first derivative (x > 0 for fractional powers).
    pub fn d1(&self, x: f64) -> f64 {
        match *self {
            BasisFn::Power { exponent: p } | BasisFn::AffinePower { exponent: p, .. } => p * x.powf(p - 1.0),
            BasisFn::Log { offset } => 1.0 / (x + offset),
        }
    }

    pub fn d2(&self, x: f64) -> f64 {
        match *self {
            BasisFn::Power { exponent: p } | BasisFn::AffinePower { exponent: p, .. } => {
                p * (p - 1.0) * x.powf(p - 2.0)
            }
            BasisFn::Log { offset } => -1.0 / (x + offset).powi(2),
        }
    }

    pub fn d3(&self, x: f64) -> f64 {
        match *self {
            BasisFn::Power { exponent: p } | BasisFn::AffinePower { exponent: p, .. } => {
                p * (p - 1.0) * (p - 2.0) * x.powf(p - 3.0)
            }
            BasisFn::Log { offset } => 2.0 / (x + offset).powi(3),
        }
    }

    /// Asymptotic growth order: the exponent for power families, 0 for log.
    pub fn growth_order(&self) -> f64 {
        match *self {
            BasisFn::Power { exponent } | BasisFn::AffinePower { exponent, .. } => exponent,
            BasisFn::Log { .. } => 0.0,
        }
    }
}

#[inline]
fn pow0(x: f64, p: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x.powf(p)
    }
}

/// Basis layout: `per_server[n][j]` is φ[n,j]; `highest` is the index H of the
/// fastest-growing entry, shared by all servers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisSpec {
    pub per_server: Vec<Vec<BasisFn>>,
    pub highest: usize,
}

impl BasisSpec {
    /// Same basis list for every server; `highest` is picked by growth order
    /// (first maximum).
    pub fn uniform(fns: Vec<BasisFn>, n_servers: usize) -> Result<Self> {
        let highest = fns
            .iter()
            .enumerate()
            .fold(None::<(usize, f64)>, |best, (j, f)| match best {
                Some((_, g)) if g >= f.growth_order() => best,
                _ => Some((j, f.growth_order())),
            })
            .map(|(j, _)| j)
            .ok_or_else(|| Error::arg("basis list is empty"))?;
        let spec = BasisSpec {
            per_server: vec![fns; n_servers],
            highest,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// (1 + x^0.01, x^0.2, x, x^1.5) on every server.
    pub fn standard(n_servers: usize) -> Self {
        BasisSpec {
            per_server: vec![Self::standard_list(); n_servers],
            highest: 3,
        }
    }

    pub fn standard_list() -> Vec<BasisFn> {
        vec![
            BasisFn::AffinePower {
                constant: 1.0,
                exponent: 0.01,
            },
            BasisFn::Power { exponent: 0.2 },
            BasisFn::Power { exponent: 1.0 },
            BasisFn::Power { exponent: 1.5 },
        ]
    }

    pub fn n_servers(&self) -> usize {
        self.per_server.len()
    }

    /// Functions per server.
    pub fn p(&self) -> usize {
        self.per_server.first().map_or(0, Vec::len)
    }

    pub fn dim(&self) -> usize {
        self.n_servers() * self.p()
    }

    /// Flat index of w[n,H].
    pub fn highest_index(&self, n: usize) -> usize {
        n * self.p() + self.highest
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.p();
        if self.per_server.is_empty() || p == 0 {
            return Err(Error::arg("basis needs at least one server and one function"));
        }
        if let Some(n) = self.per_server.iter().position(|l| l.len() != p) {
            return Err(Error::arg(format!(
                "server {n} has {} basis functions, expected {p}",
                self.per_server[n].len()
            )));
        }
        if self.highest >= p {
            return Err(Error::arg(format!("highest index {} out of range 0..{p}", self.highest)));
        }
        for (n, list) in self.per_server.iter().enumerate() {
            for f in list {
                f.validate()?;
            }
            let h = list[self.highest].growth_order();
            if let Some(j) = list.iter().position(|f| f.growth_order() > h) {
                return Err(Error::arg(format!(
                    "server {n}: entry {j} grows faster than designated highest entry {}",
                    self.highest
                )));
            }
            let rank = gram_rank(list);
            if rank < p {
                return Err(Error::arg(format!(
                    "server {n}: basis functions are linearly dependent on 0..={} (rank {rank} < {p})",
                    2 * p
                )));
            }
        }
        Ok(())
    }

    pub fn compile(&self) -> Result<Features> {
        self.validate()?;
        Features::build(self.clone())
    }
}

/// Numerical rank of the (2P+1) × P evaluation matrix on x ∈ {0..2P}.
fn gram_rank(list: &[BasisFn]) -> usize {
    let p = list.len();
    let rows = 2 * p + 1;
    let m = DMatrix::from_fn(rows, p, |i, j| list[j].value(i as f64));
    let sv = m.singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    sv.iter().filter(|&&s| s > max * 1e-10).count()
}

const TABLE_LEN: usize = 4096;

/// A validated basis with a lookup table of φ values on small arguments.
#[derive(Clone, Debug)]
pub struct Features {
    spec: BasisSpec,
    // table[(n * P + j) * TABLE_LEN + x]
    table: Vec<f64>,
}

impl Features {
    fn build(spec: BasisSpec) -> Result<Self> {
        let p = spec.p();
        let mut table = vec![0.0; spec.dim() * TABLE_LEN];
        for (n, list) in spec.per_server.iter().enumerate() {
            for (j, f) in list.iter().enumerate() {
                for x in 0..TABLE_LEN {
                    let v = f.value(x as f64);
                    if !(v.is_finite() && v >= 0.0) {
                        return Err(Error::Numeric(format!("φ[{n},{j}]({x}) = {v}")));
                    }
                    table[(n * p + j) * TABLE_LEN + x] = v;
                }
            }
        }
        Ok(Features { spec, table })
    }

    pub fn spec(&self) -> &BasisSpec {
        &self.spec
    }

    pub fn n_servers(&self) -> usize {
        self.spec.n_servers()
    }

    pub fn p(&self) -> usize {
        self.spec.p()
    }

    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    pub fn highest(&self) -> usize {
        self.spec.highest
    }

    /// φ[n,j](x).
    #[inline]
    pub fn value(&self, n: usize, j: usize, x: u64) -> f64 {
        if (x as usize) < TABLE_LEN {
            self.table[(n * self.p() + j) * TABLE_LEN + x as usize]
        } else {
            self.spec.per_server[n][j].value(x as f64)
        }
    }

    /// w_nᵀ φ_n(x).
    #[inline]
    pub fn server_value(&self, w: &[f64], n: usize, x: u64) -> f64 {
        let p = self.p();
        (0..p).map(|j| w[n * p + j] * self.value(n, j, x)).sum()
    }

    /// w_nᵀ φ_{n+}(x) = w_nᵀ (φ_n(x+1) − φ_n(x)).
    #[inline]
    pub fn server_increment(&self, w: &[f64], n: usize, x: u64) -> f64 {
        let p = self.p();
        (0..p)
            .map(|j| w[n * p + j] * (self.value(n, j, x + 1) - self.value(n, j, x)))
            .sum()
    }

    /// Writes φ(x, a) into `out` without validation.
    pub(crate) fn fill_phi(&self, x: &[u32], action: usize, out: &mut [f64]) {
        let p = self.p();
        for (n, &xn) in x.iter().enumerate() {
            let arg = xn as u64 + u64::from(n == action);
            for j in 0..p {
                out[n * p + j] = self.value(n, j, arg);
            }
        }
    }

    /// Q̂ without validation; the action only enters through w_aᵀφ_{a+}(x_a).
    #[inline]
    pub(crate) fn q_unchecked(&self, w: &[f64], x: &[u32], action: usize) -> f64 {
        let p = self.p();
        let mut q = 0.0;
        for (n, &xn) in x.iter().enumerate() {
            let arg = xn as u64 + u64::from(n == action);
            for j in 0..p {
                q += w[n * p + j] * self.value(n, j, arg);
            }
        }
        q
    }

    fn check(&self, x: &[u32], action: usize) -> Result<()> {
        if x.len() != self.n_servers() {
            return Err(Error::arg(format!(
                "state has {} queues, basis has {} servers",
                x.len(),
                self.n_servers()
            )));
        }
        if action >= self.n_servers() {
            return Err(Error::arg(format!("action {action} out of range")));
        }
        Ok(())
    }

    fn check_weights(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.dim() {
            return Err(Error::arg(format!(
                "weight vector has length {}, basis needs {}",
                w.len(),
                self.dim()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// φ(x, a).
pub fn phi(features: &Features, state: &State, action: usize) -> Result<FeatureVector> {
    features.check(state.as_slice(), action)?;
    let mut out = vec![0.0; features.dim()];
    features.fill_phi(state.as_slice(), action, &mut out);
    let p = features.p();
    if let Some(i) = out.iter().position(|v| !v.is_finite()) {
        let (n, j) = (i / p, i % p);
        return Err(Error::Numeric(format!(
            "φ[{n},{j}]({}) = {}",
            state[n] as u64 + u64::from(n == action),
            out[i]
        )));
    }
    Ok(FeatureVector(out))
}

/// Q̂(x, a; w) = wᵀφ(x, a).
pub fn q_hat(features: &Features, w: &[f64], state: &State, action: usize) -> Result<f64> {
    features.check(state.as_slice(), action)?;
    features.check_weights(w)?;
    let q = features.q_unchecked(w, state.as_slice(), action);
    if !q.is_finite() {
        return Err(Error::Numeric(format!("Q̂({:?}, {action}) = {q}", state.0)));
    }
    Ok(q)
}

/// φ_{n+}(x) = φ_n(x+1) − φ_n(x).
pub fn phi_forward_diff(features: &Features, n: usize, x: u64) -> Result<Vec<f64>> {
    if n >= features.n_servers() {
        return Err(Error::arg(format!("server {n} out of range")));
    }
    Ok((0..features.p())
        .map(|j| features.value(n, j, x + 1) - features.value(n, j, x))
        .collect())
}

/// φ_{n−}(x) = φ_n(x−1) − φ_n(x), defined for x ≥ 1.
pub fn phi_backward_diff(features: &Features, n: usize, x: u64) -> Result<Vec<f64>> {
    if n >= features.n_servers() {
        return Err(Error::arg(format!("server {n} out of range")));
    }
    if x == 0 {
        return Err(Error::arg("backward difference needs x ≥ 1"));
    }
    Ok((0..features.p())
        .map(|j| features.value(n, j, x - 1) - features.value(n, j, x))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Assumption1Scope {
    /// Only the designated highest-degree entry of each server.
    #[default]
    HighestOnly,
    /// Every basis entry.
    AllEntries,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Assumption1Witness {
    pub server: usize,
    pub entry: usize,
    pub x: u64,
    pub lhs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Assumption1Report {
    pub b_de: f64,
    pub b_l: Option<u64>,
    pub eps_w: Option<f64>,
    pub scope: Assumption1Scope,
    pub x_max: u64,
    /// Every φ_n grows: Σ_j φ[n,j](10^6) > Σ_j φ[n,j](10^3).
    pub coercive: bool,
    pub pass: bool,
    pub witness: Option<Assumption1Witness>,
}

/// Certifies the basis growth condition on the window x ∈ [0, x_max].
///
/// `b_de` is the largest second or third derivative of the highest-degree
/// entry over x ∈ [1, x_max] (floored at 0). The report then carries the
/// smallest `b_l` such that `(λ/Σμ − 1)·φ′(x) + 4·b_de < 0` for every
/// in-scope entry and every x in [b_l, x_max], and `eps_w` as the largest
/// margin achievable from that threshold.
pub fn check_assumption1(
    spec: &BasisSpec,
    config: &SystemConfig,
    x_max: u64,
    scope: Assumption1Scope,
) -> Result<Assumption1Report> {
    if x_max < 1 {
        return Err(Error::arg("x_max must be at least 1"));
    }
    spec.validate()?;
    if spec.n_servers() != config.n_servers() {
        return Err(Error::arg("basis and system disagree on the number of servers"));
    }
    let h = spec.highest;
    let mut b_de = 0.0_f64;
    for list in &spec.per_server {
        let f = list[h];
        for x in 1..=x_max {
            let xf = x as f64;
            b_de = b_de.max(f.d2(xf)).max(f.d3(xf));
        }
    }
    let coef = config.load() - 1.0;
    let entries: Vec<usize> = match scope {
        Assumption1Scope::HighestOnly => vec![h],
        Assumption1Scope::AllEntries => (0..spec.p()).collect(),
    };
    // Worst left-hand side per x over all in-scope (n, j).
    let mut worst: Vec<Assumption1Witness> = Vec::with_capacity(x_max as usize + 1);
    for x in 0..=x_max {
        let xf = x as f64;
        let mut w: Option<Assumption1Witness> = None;
        for (n, list) in spec.per_server.iter().enumerate() {
            for &j in &entries {
                let d = list[j].d1(xf);
                // Fractional powers have φ′(0) = ∞, which only helps when coef < 0.
                let lhs = if d.is_infinite() && coef < 0.0 {
                    f64::NEG_INFINITY
                } else {
                    coef * d + 4.0 * b_de
                };
                let lhs = if lhs.is_nan() { f64::INFINITY } else { lhs };
                if w.as_ref().is_none_or(|w| lhs > w.lhs) {
                    w = Some(Assumption1Witness { server: n, entry: j, x, lhs });
                }
            }
        }
        worst.push(w.expect("at least one entry in scope"));
    }
    // Scan from the right for the longest tail where the condition holds.
    let mut b_l = None;
    let mut tail_max = f64::NEG_INFINITY;
    let mut eps = None;
    for x in (0..=x_max).rev() {
        let lhs = worst[x as usize].lhs;
        if lhs >= 0.0 {
            break;
        }
        tail_max = tail_max.max(lhs);
        b_l = Some(x);
        eps = Some(-tail_max);
    }
    let coercive = spec.per_server.iter().all(|list| {
        let s = |x: f64| list.iter().map(|f| f.value(x)).sum::<f64>();
        s(1e6) > s(1e3)
    });
    let pass = b_l.is_some();
    let witness = if pass {
        None
    } else {
        Some(worst[x_max as usize].clone())
    };
    Ok(Assumption1Report {
        b_de,
        b_l,
        eps_w: eps,
        scope,
        x_max,
        coercive,
        pass,
        witness,
    })
}
