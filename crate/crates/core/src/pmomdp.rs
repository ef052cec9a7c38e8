//! Multi-domain MDP data model: shared states and actions, one transition
//! kernel and reward table per domain, preferences over domains and exact
//! per-domain soft policy evaluation.

use std::fmt;

use ndarray::{Array1, Array2, Array3, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;

/// Tolerance on probability rows and weight vectors.
pub const PROB_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum PmomdpError {
    #[error("invalid mdp: {0:?}")]
    Invalid(Vec<Violation>),
    #[error("index out of range: {what} = {index} (limit {limit})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("singular linear system in policy evaluation (domain {0})")]
    Singular(usize),
    #[error("invalid preference: {0}")]
    Preference(String),
    #[error("parse error: {0}")]
    Parse(String),
}

/// One defect found by [`validate_mdp`].
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    GammaOutOfRange(f64),
    NoDomains,
    Shape {
        domain: usize,
        detail: String,
    },
    RowSum {
        domain: usize,
        state: usize,
        action: usize,
        sum: f64,
    },
    NegativeProbability {
        domain: usize,
        state: usize,
        action: usize,
    },
    NonFinite {
        domain: usize,
        field: &'static str,
    },
    InitialDistribution(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::GammaOutOfRange(g) => write!(f, "gamma out of range: {g}"),
            Violation::NoDomains => write!(f, "no domains"),
            Violation::Shape { domain, detail } => write!(f, "domain {domain}: shape {detail}"),
            Violation::RowSum {
                domain,
                state,
                action,
                sum,
            } => write!(
                f,
                "domain {domain}, state {state}, action {action}: row sums to {sum}"
            ),
            Violation::NegativeProbability {
                domain,
                state,
                action,
            } => write!(
                f,
                "domain {domain}, state {state}, action {action}: negative probability"
            ),
            Violation::NonFinite { domain, field } => {
                write!(f, "domain {domain}: non-finite {field}")
            }
            Violation::InitialDistribution(d) => write!(f, "initial distribution: {d}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub kappa: Vec<f64>,
    /// `[state, action, next_state]`
    pub transition: Array3<f64>,
    /// `[state, action]`
    pub reward: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiDomainMDP {
    pub n_states: usize,
    pub n_actions: usize,
    pub domains: Vec<DomainSpec>,
    pub gamma: f64,
    pub initial: Array1<f64>,
}

impl MultiDomainMDP {
    pub fn n_domains(&self) -> usize {
        self.domains.len()
    }

    /// Largest absolute reward over all domains.
    pub fn reward_bound(&self) -> f64 {
        self.domains
            .iter()
            .flat_map(|d| d.reward.iter())
            .fold(0.0_f64, |m, r| m.max(r.abs()))
    }

    /// Bound on any soft value: `(r_max + alpha ln|A|) / (1 - gamma)`.
    pub fn value_bound(&self, alpha: f64) -> f64 {
        (self.reward_bound() + alpha * (self.n_actions as f64).ln()) / (1.0 - self.gamma)
    }

    /// Restriction to a subset of domains, in the given order.
    pub fn select_domains(&self, indices: &[usize]) -> MultiDomainMDP {
        MultiDomainMDP {
            n_states: self.n_states,
            n_actions: self.n_actions,
            domains: indices.iter().map(|&i| self.domains[i].clone()).collect(),
            gamma: self.gamma,
            initial: self.initial.clone(),
        }
    }

    pub fn to_toml(&self) -> String {
        let file = MdpFile {
            n_states: self.n_states,
            n_actions: self.n_actions,
            gamma: self.gamma,
            initial: self.initial.to_vec(),
            domains: self
                .domains
                .iter()
                .map(|d| DomainFile {
                    kappa: d.kappa.clone(),
                    transition: d
                        .transition
                        .outer_iter()
                        .map(|sa| sa.outer_iter().map(|row| row.to_vec()).collect())
                        .collect(),
                    reward: d.reward.outer_iter().map(|row| row.to_vec()).collect(),
                })
                .collect(),
        };
        toml::to_string(&file).expect("mdp serialization")
    }

    pub fn from_toml(text: &str) -> Result<Self, PmomdpError> {
        let file: MdpFile = toml::from_str(text).map_err(|e| PmomdpError::Parse(e.to_string()))?;
        let (ns, na) = (file.n_states, file.n_actions);
        let mut domains = Vec::with_capacity(file.domains.len());
        for (i, d) in file.domains.into_iter().enumerate() {
            let flat: Vec<f64> = d.transition.iter().flatten().flatten().copied().collect();
            let transition = Array3::from_shape_vec((ns, na, ns), flat)
                .map_err(|_| PmomdpError::Shape(format!("domain {i} transition")))?;
            let flat: Vec<f64> = d.reward.iter().flatten().copied().collect();
            let reward = Array2::from_shape_vec((ns, na), flat)
                .map_err(|_| PmomdpError::Shape(format!("domain {i} reward")))?;
            domains.push(DomainSpec {
                kappa: d.kappa,
                transition,
                reward,
            });
        }
        let mdp = MultiDomainMDP {
            n_states: ns,
            n_actions: na,
            domains,
            gamma: file.gamma,
            initial: Array1::from(file.initial),
        };
        let report = validate_mdp(&mdp);
        if report.is_empty() {
            Ok(mdp)
        } else {
            Err(PmomdpError::Invalid(report))
        }
    }
}

/// On-disk schema for a multi-domain MDP.
///
/// ```toml
/// n_states = 2
/// n_actions = 1
/// gamma = 0.9
/// initial = [1.0, 0.0]
///
/// [[domains]]
/// kappa = [0.1]
/// transition = [[[0.0, 1.0]], [[0.0, 1.0]]]   # [state][action][next_state]
/// reward = [[1.0], [0.0]]                      # [state][action]
/// ```
#[derive(Serialize, Deserialize)]
struct MdpFile {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    initial: Vec<f64>,
    domains: Vec<DomainFile>,
}

#[derive(Serialize, Deserialize)]
struct DomainFile {
    kappa: Vec<f64>,
    transition: Vec<Vec<Vec<f64>>>,
    reward: Vec<Vec<f64>>,
}

/// Lists every defect; an empty list means the MDP is valid.
pub fn validate_mdp(mdp: &MultiDomainMDP) -> Vec<Violation> {
    let mut out = Vec::new();
    if !(mdp.gamma > 0.0 && mdp.gamma < 1.0) {
        out.push(Violation::GammaOutOfRange(mdp.gamma));
    }
    if mdp.domains.is_empty() {
        out.push(Violation::NoDomains);
    }
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    if mdp.initial.len() != ns {
        out.push(Violation::InitialDistribution(format!(
            "length {} != {ns}",
            mdp.initial.len()
        )));
    } else {
        let sum: f64 = mdp.initial.sum();
        if (sum - 1.0).abs() > PROB_TOL || mdp.initial.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            out.push(Violation::InitialDistribution(format!("not a distribution (sum {sum})")));
        }
    }
    for (i, d) in mdp.domains.iter().enumerate() {
        if d.transition.dim() != (ns, na, ns) {
            out.push(Violation::Shape {
                domain: i,
                detail: format!("transition {:?} != {:?}", d.transition.dim(), (ns, na, ns)),
            });
            continue;
        }
        if d.reward.dim() != (ns, na) {
            out.push(Violation::Shape {
                domain: i,
                detail: format!("reward {:?} != {:?}", d.reward.dim(), (ns, na)),
            });
            continue;
        }
        if d.kappa.iter().any(|k| !k.is_finite()) {
            out.push(Violation::NonFinite {
                domain: i,
                field: "kappa",
            });
        }
        if d.reward.iter().any(|r| !r.is_finite()) {
            out.push(Violation::NonFinite {
                domain: i,
                field: "reward",
            });
        }
        for s in 0..ns {
            for a in 0..na {
                let row = d.transition.slice(ndarray::s![s, a, ..]);
                if row.iter().any(|&p| p < 0.0 || !p.is_finite()) {
                    out.push(Violation::NegativeProbability {
                        domain: i,
                        state: s,
                        action: a,
                    });
                }
                let sum = row.sum();
                if (sum - 1.0).abs() > PROB_TOL {
                    out.push(Violation::RowSum {
                        domain: i,
                        state: s,
                        action: a,
                        sum,
                    });
                }
            }
        }
    }
    out
}

/// Per-domain values, one entry per domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueVector(pub Vec<f64>);

impl ValueVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
    pub fn len(&self) -> usize {
        self.0.len()
    }
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<f64>> for ValueVector {
    fn from(v: Vec<f64>) -> Self {
        ValueVector(v)
    }
}

/// Uncertainty over domains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Preference {
    Discrete { weights: Vec<f64> },
    Delta { index: usize, n: usize },
    /// Uniform distribution over a box with mean `mu` and standard deviation
    /// `sigma` per coordinate; support `[mu - sqrt(3) sigma, mu + sqrt(3) sigma]`.
    UniformBox { mu: Vec<f64>, sigma: Vec<f64> },
}

impl Preference {
    pub fn discrete(weights: Vec<f64>) -> Result<Self, PmomdpError> {
        check_weights(&weights)?;
        Ok(Preference::Discrete { weights })
    }

    pub fn delta(index: usize, n: usize) -> Result<Self, PmomdpError> {
        if index >= n {
            return Err(PmomdpError::IndexOutOfRange {
                what: "delta index",
                index,
                limit: n,
            });
        }
        Ok(Preference::Delta { index, n })
    }

    pub fn uniform(n: usize) -> Self {
        Preference::Discrete {
            weights: vec![1.0 / n as f64; n],
        }
    }

    /// `range` is the full randomization box, one `(lo, hi)` per coordinate.
    pub fn uniform_box(mu: Vec<f64>, sigma: Vec<f64>, range: &[(f64, f64)]) -> Result<Self, PmomdpError> {
        if mu.len() != sigma.len() || mu.len() != range.len() {
            return Err(PmomdpError::Shape("uniform box dimensions".into()));
        }
        for ((&m, &s), &(lo, hi)) in mu.iter().zip(&sigma).zip(range) {
            if !(s >= 0.0) || !m.is_finite() {
                return Err(PmomdpError::Preference(format!("bad box mu={m} sigma={s}")));
            }
            let half = 3f64.sqrt() * s;
            if m - half < lo - PROB_TOL || m + half > hi + PROB_TOL {
                return Err(PmomdpError::Preference(format!(
                    "support [{}, {}] outside [{lo}, {hi}]",
                    m - half,
                    m + half
                )));
            }
        }
        Ok(Preference::UniformBox { mu, sigma })
    }

    /// Box covering the whole range.
    pub fn full_box(range: &[(f64, f64)]) -> Self {
        let mu = range.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect();
        let sigma = range.iter().map(|(lo, hi)| (hi - lo) / 12f64.sqrt()).collect();
        Preference::UniformBox { mu, sigma }
    }

    /// Weights over `n` domains, when the preference is discrete.
    pub fn weights(&self, n: usize) -> Result<Vec<f64>, PmomdpError> {
        match self {
            Preference::Discrete { weights } if weights.len() == n => Ok(weights.clone()),
            Preference::Discrete { weights } => Err(PmomdpError::Shape(format!(
                "preference over {} domains, mdp has {n}",
                weights.len()
            ))),
            Preference::Delta { index, n: m } if *m == n => {
                let mut w = vec![0.0; n];
                w[*index] = 1.0;
                Ok(w)
            }
            Preference::Delta { n: m, .. } => Err(PmomdpError::Shape(format!(
                "delta over {m} domains, mdp has {n}"
            ))),
            Preference::UniformBox { .. } => Err(PmomdpError::Preference(
                "uniform box has no weights over a discrete domain set".into(),
            )),
        }
    }
}

fn check_weights(w: &[f64]) -> Result<(), PmomdpError> {
    if w.is_empty() || w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(PmomdpError::Preference(format!("weights {w:?}")));
    }
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > PROB_TOL {
        return Err(PmomdpError::Preference(format!("weights sum to {sum}")));
    }
    Ok(())
}

/// Simplex grid at resolution `R`: all weight vectors with entries in
/// `{0, 1/R, ..., 1}`. Always contains the vertices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceGrid {
    pub cells: Vec<Vec<f64>>,
    pub resolution: usize,
}

impl PreferenceGrid {
    pub fn default_resolution(n_domains: usize) -> usize {
        if n_domains <= 2 {
            10
        } else {
            4
        }
    }

    /// Cells in lexicographic order of their integer numerators; for two
    /// domains cell `k` is `[k/R, 1 - k/R]`.
    pub fn simplex(n_domains: usize, resolution: usize) -> Result<Self, PmomdpError> {
        if n_domains == 0 {
            return Err(PmomdpError::Preference("zero domains".into()));
        }
        if resolution == 0 && n_domains > 1 {
            return Err(PmomdpError::Preference("resolution 0".into()));
        }
        let mut cells = Vec::new();
        let mut current = vec![0usize; n_domains];
        compositions(resolution, 0, &mut current, &mut cells);
        let r = resolution.max(1) as f64;
        let cells = cells
            .into_iter()
            .map(|c| c.into_iter().map(|k| k as f64 / r).collect())
            .collect();
        Ok(PreferenceGrid { cells, resolution })
    }

    /// A grid holding exactly the given cells.
    pub fn from_cells(cells: Vec<Vec<f64>>) -> Result<Self, PmomdpError> {
        if cells.is_empty() {
            return Err(PmomdpError::Preference("empty grid".into()));
        }
        for c in &cells {
            check_weights(c)?;
        }
        Ok(PreferenceGrid { cells, resolution: 0 })
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn n_domains(&self) -> usize {
        self.cells.first().map_or(0, |c| c.len())
    }

    /// Index of the one-hot cell for domain `i`.
    pub fn delta_index(&self, i: usize) -> Option<usize> {
        self.cells
            .iter()
            .position(|c| c.iter().enumerate().all(|(j, &w)| if j == i { w == 1.0 } else { w == 0.0 }))
    }

    /// Cell closest in Euclidean distance; ties to the lowest index.
    pub fn nearest(&self, w: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (k, c) in self.cells.iter().enumerate() {
            let d: f64 = c.iter().zip(w).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, k);
            }
        }
        best.1
    }

    pub fn preference(&self, k: usize) -> Preference {
        Preference::Discrete {
            weights: self.cells[k].clone(),
        }
    }
}

fn compositions(remaining: usize, pos: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    let n = current.len();
    if pos == n - 1 {
        current[pos] = remaining;
        out.push(current.clone());
        return;
    }
    for k in 0..=remaining {
        current[pos] = k;
        compositions(remaining - k, pos + 1, current, out);
    }
}

/// Exact values of a stationary policy in every domain.
#[derive(Clone, Debug)]
pub struct PolicyValues {
    /// Soft state values `[domain, state]`.
    pub v: Array2<f64>,
    /// Soft action values `[domain, state, action]`: reward now, then the policy.
    pub q: Array3<f64>,
}

fn check_policy(mdp: &MultiDomainMDP, policy: ArrayView2<f64>) -> Result<(), PmomdpError> {
    if policy.dim() != (mdp.n_states, mdp.n_actions) {
        return Err(PmomdpError::Shape(format!(
            "policy {:?} != {:?}",
            policy.dim(),
            (mdp.n_states, mdp.n_actions)
        )));
    }
    for (s, row) in policy.outer_iter().enumerate() {
        if row.iter().any(|&p| !(p >= 0.0)) || (row.sum() - 1.0).abs() > 1e-6 {
            return Err(PmomdpError::Shape(format!("policy row {s} is not a distribution")));
        }
    }
    Ok(())
}

/// `-sum_a pi(a) ln pi(a)` with `0 ln 0 = 0`.
pub fn entropy(row: &[f64]) -> f64 {
    row.iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

/// Solves `(I - gamma P_pi) V = r_pi + alpha H(pi)` for each domain.
pub fn evaluate_policy(
    mdp: &MultiDomainMDP,
    policy: ArrayView2<f64>,
    alpha: f64,
) -> Result<PolicyValues, PmomdpError> {
    check_policy(mdp, policy)?;
    let (ns, na, nd) = (mdp.n_states, mdp.n_actions, mdp.n_domains());
    let ent: Vec<f64> = policy
        .outer_iter()
        .map(|row| entropy(&row.to_vec()))
        .collect();
    let mut v = Array2::zeros((nd, ns));
    let mut q = Array3::zeros((nd, ns, na));
    for (i, d) in mdp.domains.iter().enumerate() {
        let mut m = Array2::<f64>::eye(ns);
        let mut r = Array1::<f64>::zeros(ns);
        for s in 0..ns {
            r[s] = alpha * ent[s];
            for a in 0..na {
                let p = policy[[s, a]];
                if p == 0.0 {
                    continue;
                }
                r[s] += p * d.reward[[s, a]];
                for t in 0..ns {
                    m[[s, t]] -= mdp.gamma * p * d.transition[[s, a, t]];
                }
            }
        }
        let vi = linalg::solve(&m, &r).ok_or(PmomdpError::Singular(i))?;
        for s in 0..ns {
            for a in 0..na {
                let next: f64 = (0..ns).map(|t| d.transition[[s, a, t]] * vi[t]).sum();
                q[[i, s, a]] = d.reward[[s, a]] + mdp.gamma * next;
            }
        }
        v.row_mut(i).assign(&vi);
    }
    Ok(PolicyValues { v, q })
}

/// Exact per-domain soft state values `[domain, state]`; `alpha = 0` gives the
/// plain expected discounted return.
pub fn policy_value_exact(
    mdp: &MultiDomainMDP,
    policy: ArrayView2<f64>,
    alpha: f64,
) -> Result<Array2<f64>, PmomdpError> {
    Ok(evaluate_policy(mdp, policy, alpha)?.v)
}

/// Expectation of per-domain state values under the initial distribution.
pub fn initial_value(mdp: &MultiDomainMDP, v: &Array2<f64>) -> ValueVector {
    ValueVector(v.outer_iter().map(|row| row.dot(&mdp.initial)).collect())
}

/// Discounted state occupancy `d_i(s) = sum_t gamma^t P_i(s_t = s)` of the
/// policy from the initial distribution, per domain.
pub fn discounted_occupancy(
    mdp: &MultiDomainMDP,
    policy: ArrayView2<f64>,
) -> Result<Array2<f64>, PmomdpError> {
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let mut out = Array2::zeros((mdp.n_domains(), ns));
    for (i, d) in mdp.domains.iter().enumerate() {
        // (I - gamma P_pi)^T d = mu
        let mut m = Array2::<f64>::eye(ns);
        for s in 0..ns {
            for a in 0..na {
                let p = policy[[s, a]];
                if p == 0.0 {
                    continue;
                }
                for t in 0..ns {
                    m[[t, s]] -= mdp.gamma * p * d.transition[[s, a, t]];
                }
            }
        }
        let di = linalg::solve(&m, &mdp.initial).ok_or(PmomdpError::Singular(i))?;
        out.row_mut(i).assign(&di);
    }
    Ok(out)
}

/// Draws a next state from domain `domain`'s kernel and returns it with the
/// reward for `(state, action)`.
pub fn sample_transition<R: Rng + ?Sized>(
    mdp: &MultiDomainMDP,
    domain: usize,
    state: usize,
    action: usize,
    rng: &mut R,
) -> Result<(usize, f64), PmomdpError> {
    let d = mdp.domains.get(domain).ok_or(PmomdpError::IndexOutOfRange {
        what: "domain",
        index: domain,
        limit: mdp.n_domains(),
    })?;
    if state >= mdp.n_states {
        return Err(PmomdpError::IndexOutOfRange {
            what: "state",
            index: state,
            limit: mdp.n_states,
        });
    }
    if action >= mdp.n_actions {
        return Err(PmomdpError::IndexOutOfRange {
            what: "action",
            index: action,
            limit: mdp.n_actions,
        });
    }
    let row = d.transition.slice(ndarray::s![state, action, ..]);
    let next = sample_categorical(row.iter().copied(), rng);
    Ok((next, d.reward[[state, action]]))
}

/// Inverse-CDF draw from a probability vector; falls back to the last
/// positive entry when rounding leaves the cumulative sum short of `u`.
pub fn sample_categorical<I, R>(probs: I, rng: &mut R) -> usize
where
    I: IntoIterator<Item = f64>,
    R: Rng + ?Sized,
{
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (k, p) in probs.into_iter().enumerate() {
        if p > 0.0 {
            last = k;
            acc += p;
            if u < acc {
                return k;
            }
        }
    }
    last
}

/// Draws an initial state.
pub fn sample_initial<R: Rng + ?Sized>(mdp: &MultiDomainMDP, rng: &mut R) -> usize {
    sample_categorical(mdp.initial.iter().copied(), rng)
}

/// Expected per-domain soft value of `policy` at the initial distribution.
pub fn scalarized_value(
    mdp: &MultiDomainMDP,
    policy: ArrayView2<f64>,
    weights: &[f64],
    alpha: f64,
) -> Result<f64, PmomdpError> {
    let v = policy_value_exact(mdp, policy, alpha)?;
    let vv = initial_value(mdp, &v);
    Ok(vv.0.iter().zip(weights).map(|(a, b)| a * b).sum())
}

/// Uniform policy table `[state, action]`.
pub fn uniform_policy(n_states: usize, n_actions: usize) -> Array2<f64> {
    Array2::from_elem((n_states, n_actions), 1.0 / n_actions as f64)
}
