//! Built-in desk-scale environments: a slippery chain with two or more slip
//! values.

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pmomdp::{validate_mdp, DomainSpec, MultiDomainMDP, Preference};
use crate::unscented::{map_sigma_points, SigmaPointSet, UnscentedError};

pub const LEFT: usize = 0;
pub const RIGHT: usize = 1;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error(transparent)]
    Sigma(#[from] UnscentedError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainParams {
    pub length: usize,
    pub step_cost: f64,
    pub goal_reward: f64,
    pub gamma: f64,
}

impl Default for ChainParams {
    fn default() -> Self {
        ChainParams {
            length: 5,
            step_cost: 0.01,
            goal_reward: 1.0,
            gamma: 0.9,
        }
    }
}

/// Environment choice as written in configuration files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum EnvSpec {
    TwoDomainChain {
        #[serde(default)]
        chain: ChainParams,
        #[serde(default = "default_slip_a")]
        slip_a: f64,
        #[serde(default = "default_slip_b")]
        slip_b: f64,
    },
    /// Slip drawn from a box; the first coordinate is the slip, further
    /// coordinates are recorded in `kappa` but do not affect dynamics.
    ContinuousSlipChain {
        #[serde(default)]
        chain: ChainParams,
        range: Vec<(f64, f64)>,
    },
}

fn default_slip_a() -> f64 {
    0.1
}
fn default_slip_b() -> f64 {
    0.9
}

impl Default for EnvSpec {
    fn default() -> Self {
        EnvSpec::TwoDomainChain {
            chain: ChainParams::default(),
            slip_a: 0.1,
            slip_b: 0.9,
        }
    }
}

impl EnvSpec {
    pub fn name(&self) -> &'static str {
        match self {
            EnvSpec::TwoDomainChain { .. } => "two-domain-chain",
            EnvSpec::ContinuousSlipChain { .. } => "continuous-slip-chain",
        }
    }

    pub fn chain(&self) -> &ChainParams {
        match self {
            EnvSpec::TwoDomainChain { chain, .. } | EnvSpec::ContinuousSlipChain { chain, .. } => chain,
        }
    }

    /// Full randomization box over kappa.
    pub fn range(&self) -> Vec<(f64, f64)> {
        match self {
            EnvSpec::TwoDomainChain { slip_a, slip_b, .. } => vec![(slip_a.min(*slip_b), slip_a.max(*slip_b))],
            EnvSpec::ContinuousSlipChain { range, .. } => range.clone(),
        }
    }
}

/// One domain of the chain: states `0..length`, goal `length - 1` absorbs.
/// The intended move succeeds with probability `1 - slip`, otherwise the
/// opposite move happens; moving left from state 0 stays put.
fn chain_domain(p: &ChainParams, slip: f64, kappa: Vec<f64>) -> DomainSpec {
    let n = p.length;
    let goal = n - 1;
    let mut transition = Array3::zeros((n, 2, n));
    let mut reward = Array2::zeros((n, 2));
    for s in 0..n {
        if s == goal {
            transition[[s, LEFT, s]] = 1.0;
            transition[[s, RIGHT, s]] = 1.0;
            continue;
        }
        let left = s.saturating_sub(1);
        let right = s + 1;
        for a in [LEFT, RIGHT] {
            let (intended, reversed) = if a == RIGHT { (right, left) } else { (left, right) };
            transition[[s, a, intended]] += 1.0 - slip;
            transition[[s, a, reversed]] += slip;
            reward[[s, a]] = -p.step_cost + p.goal_reward * transition[[s, a, goal]];
        }
    }
    DomainSpec {
        kappa,
        transition,
        reward,
    }
}

fn check_chain(p: &ChainParams) -> Result<(), EnvError> {
    if p.length < 3 {
        return Err(EnvError::Parameter(format!("length {} < 3", p.length)));
    }
    if !(p.gamma > 0.0 && p.gamma < 1.0) {
        return Err(EnvError::Parameter(format!("gamma {}", p.gamma)));
    }
    if !p.step_cost.is_finite() || !p.goal_reward.is_finite() {
        return Err(EnvError::Parameter("non-finite reward constant".into()));
    }
    Ok(())
}

fn chain_mdp(p: &ChainParams, domains: Vec<DomainSpec>) -> MultiDomainMDP {
    let mut initial = Array1::zeros(p.length);
    initial[0] = 1.0;
    let mdp = MultiDomainMDP {
        n_states: p.length,
        n_actions: 2,
        domains,
        gamma: p.gamma,
        initial,
    };
    debug_assert!(validate_mdp(&mdp).is_empty());
    mdp
}

pub fn build_two_domain_chain(p: &ChainParams, slip_a: f64, slip_b: f64) -> Result<MultiDomainMDP, EnvError> {
    check_chain(p)?;
    for s in [slip_a, slip_b] {
        if !(0.0..=1.0).contains(&s) {
            return Err(EnvError::Parameter(format!("slip {s} outside [0, 1]")));
        }
    }
    Ok(chain_mdp(
        p,
        vec![chain_domain(p, slip_a, vec![slip_a]), chain_domain(p, slip_b, vec![slip_b])],
    ))
}

/// The default two-domain instance (slips 0.1 and 0.9).
pub fn two_domain_chain() -> MultiDomainMDP {
    build_two_domain_chain(&ChainParams::default(), 0.1, 0.9).expect("default chain")
}

/// Chain with one domain per row of `kappas`; column 0 is the slip.
/// Slips outside `[0, 1]` are clipped with a warning.
pub fn slip_chain_from_kappas(p: &ChainParams, kappas: &Array2<f64>) -> Result<MultiDomainMDP, EnvError> {
    check_chain(p)?;
    if kappas.ncols() == 0 || kappas.nrows() == 0 {
        return Err(EnvError::Parameter("empty kappa set".into()));
    }
    let domains = kappas
        .outer_iter()
        .map(|k| {
            let raw = k[0];
            let slip = raw.clamp(0.0, 1.0);
            if slip != raw {
                log::warn!("slip {raw} clipped to {slip}");
            }
            chain_domain(p, slip, k.to_vec())
        })
        .collect();
    Ok(chain_mdp(p, domains))
}

/// One domain per sigma point, mapped into the box `pref`.
pub fn build_slip_chain_for_box(
    p: &ChainParams,
    pref: &Preference,
    sigma_points: &SigmaPointSet,
) -> Result<MultiDomainMDP, EnvError> {
    let kappas = map_sigma_points(sigma_points, pref)?;
    slip_chain_from_kappas(p, &kappas)
}

/// One domain per sigma point over the full range `[lo, hi]` per coordinate.
pub fn build_continuous_slip_chain(
    p: &ChainParams,
    range: &[(f64, f64)],
    sigma_points: &SigmaPointSet,
) -> Result<MultiDomainMDP, EnvError> {
    for &(lo, hi) in range {
        if !(lo < hi) || lo < 0.0 || hi > 1.0 {
            return Err(EnvError::Parameter(format!("range [{lo}, {hi}]")));
        }
    }
    build_slip_chain_for_box(p, &Preference::full_box(range), sigma_points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pmomdp::policy_value_exact;
    use ndarray::array;

    #[test]
    fn default_instance_is_valid() {
        let mdp = two_domain_chain();
        assert!(validate_mdp(&mdp).is_empty());
        assert_eq!((mdp.n_states, mdp.n_actions, mdp.n_domains()), (5, 2, 2));
    }

    #[test]
    fn deterministic_chain_closed_form() {
        let p = ChainParams::default();
        let mdp = build_two_domain_chain(&p, 0.0, 0.0).unwrap();
        let mut pi = Array2::zeros((5, 2));
        pi.column_mut(RIGHT).fill(1.0);
        let v = policy_value_exact(&mdp, pi.view(), 0.0).unwrap();
        let g: f64 = 0.9;
        let expected = g.powi(3) - 0.01 * (0..4).map(|t| g.powi(t)).sum::<f64>();
        assert!((v[[0, 0]] - expected).abs() < 1e-12, "{} vs {expected}", v[[0, 0]]);
    }

    #[test]
    fn rejects_bad_parameters() {
        let mut p = ChainParams::default();
        assert!(build_two_domain_chain(&p, 0.1, 1.1).is_err());
        p.length = 2;
        assert!(build_two_domain_chain(&p, 0.1, 0.9).is_err());
    }

    #[test]
    fn sigma_point_domains() {
        let set = SigmaPointSet::from_points(array![[0.2], [0.5], [0.8]], 1);
        let mdp = build_continuous_slip_chain(&ChainParams::default(), &[(0.1, 0.9)], &set).unwrap();
        assert_eq!(mdp.n_domains(), 3);
        let slips: Vec<f64> = mdp.domains.iter().map(|d| d.kappa[0]).collect();
        assert!(slips[0] < slips[1] && slips[1] < slips[2]);
        let flat = Preference::UniformBox {
            mu: vec![0.4],
            sigma: vec![0.0],
        };
        let same = build_slip_chain_for_box(&ChainParams::default(), &flat, &set).unwrap();
        assert!(same.domains.iter().all(|d| d.transition == same.domains[0].transition));
    }
}
