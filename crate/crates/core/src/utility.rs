//! Linear scalarization, Pareto dominance and coverage sets.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pmomdp::{self, MultiDomainMDP, PmomdpError, PreferenceGrid, ValueVector};

/// Default cap on the number of enumerated deterministic policies.
pub const ORACLE_CAP: usize = 200_000;

#[derive(Debug, Error)]
pub enum UtilityError {
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("{count} deterministic policies exceed the cap of {cap}")]
    CapExceeded { count: f64, cap: usize },
    #[error(transparent)]
    Model(#[from] PmomdpError),
}

pub fn linear_utility(v: &[f64], w: &[f64]) -> Result<f64, UtilityError> {
    if v.len() != w.len() {
        return Err(UtilityError::Length(v.len(), w.len()));
    }
    Ok(v.iter().zip(w).map(|(a, b)| a * b).sum())
}

/// Weak dominance: `a >= b` everywhere and `a > b` somewhere.
pub fn pareto_dominates(a: &[f64], b: &[f64]) -> Result<bool, UtilityError> {
    if a.len() != b.len() {
        return Err(UtilityError::Length(a.len(), b.len()));
    }
    let mut strict = false;
    for (x, y) in a.iter().zip(b) {
        if x < y {
            return Ok(false);
        }
        if x > y {
            strict = true;
        }
    }
    Ok(strict)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoverageKind {
    Pcs,
    Ccs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageEntry {
    /// Index into the input sequence.
    pub id: usize,
    pub values: ValueVector,
    /// A preference under which the entry is optimal (CCS only).
    pub witness: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageSet {
    pub kind: CoverageKind,
    pub entries: Vec<CoverageEntry>,
}

impl CoverageSet {
    pub fn ids(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.id).collect()
    }
}

fn check_lengths(values: &[ValueVector]) -> Result<usize, UtilityError> {
    let first = values.first().ok_or(UtilityError::Empty)?.len();
    for v in values {
        if v.len() != first {
            return Err(UtilityError::Length(v.len(), first));
        }
    }
    Ok(first)
}

/// Entries not dominated by any other entry, in input order.
pub fn compute_pcs(values: &[ValueVector]) -> Result<CoverageSet, UtilityError> {
    check_lengths(values)?;
    let mut entries = Vec::new();
    'outer: for (i, v) in values.iter().enumerate() {
        for (j, u) in values.iter().enumerate() {
            if i != j && pareto_dominates(u.as_slice(), v.as_slice())? {
                continue 'outer;
            }
        }
        entries.push(CoverageEntry {
            id: i,
            values: v.clone(),
            witness: None,
        });
    }
    Ok(CoverageSet {
        kind: CoverageKind::Pcs,
        entries,
    })
}

/// Maximum of `w . v` over `values` with the lowest maximizing index.
pub fn optimal_scalarized_value(values: &[ValueVector], w: &[f64]) -> Result<(f64, usize), UtilityError> {
    check_lengths(values)?;
    let mut best = (f64::NEG_INFINITY, 0);
    for (k, v) in values.iter().enumerate() {
        let u = linear_utility(v.as_slice(), w)?;
        if u > best.0 {
            best = (u, k);
        }
    }
    Ok(best)
}

/// PCS members that attain the maximal scalarized value for some test
/// preference. Test preferences are the grid cells; with two domains the
/// pairwise tie weights are added together with one weight strictly inside
/// every interval between consecutive ties, which makes membership exact.
pub fn compute_ccs(values: &[ValueVector], grid: &PreferenceGrid) -> Result<CoverageSet, UtilityError> {
    let n = check_lengths(values)?;
    if grid.n_domains() != n {
        return Err(UtilityError::Length(grid.n_domains(), n));
    }
    let pcs = compute_pcs(values)?;
    let mut tests: Vec<Vec<f64>> = grid.cells.clone();
    if n == 2 {
        tests.extend(two_domain_test_weights(&pcs));
    }
    let mut witness: Vec<Option<Vec<f64>>> = vec![None; pcs.entries.len()];
    for w in &tests {
        let scores: Vec<f64> = pcs
            .entries
            .iter()
            .map(|e| linear_utility(e.values.as_slice(), w))
            .collect::<Result<_, _>>()?;
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for (k, s) in scores.iter().enumerate() {
            if *s >= max && witness[k].is_none() {
                witness[k] = Some(w.clone());
            }
        }
    }
    let entries = pcs
        .entries
        .into_iter()
        .zip(witness)
        .filter_map(|(mut e, w)| {
            e.witness = Some(w?);
            Some(e)
        })
        .collect();
    Ok(CoverageSet {
        kind: CoverageKind::Ccs,
        entries,
    })
}

fn two_domain_test_weights(pcs: &CoverageSet) -> Vec<Vec<f64>> {
    // w = [t, 1 - t]; entries i, j tie where t (a0 - a1) + a1 = t (b0 - b1) + b1.
    let mut ties = vec![0.0, 1.0];
    let e = &pcs.entries;
    for i in 0..e.len() {
        for j in i + 1..e.len() {
            let (a, b) = (e[i].values.as_slice(), e[j].values.as_slice());
            let denom = (a[0] - a[1]) - (b[0] - b[1]);
            if denom != 0.0 {
                let t = (b[1] - a[1]) / denom;
                if t > 0.0 && t < 1.0 {
                    ties.push(t);
                }
            }
        }
    }
    ties.sort_by(|x, y| x.partial_cmp(y).unwrap());
    ties.dedup();
    let mut out: Vec<Vec<f64>> = ties.iter().map(|&t| vec![t, 1.0 - t]).collect();
    for pair in ties.windows(2) {
        let t = 0.5 * (pair[0] + pair[1]);
        out.push(vec![t, 1.0 - t]);
    }
    out
}

/// Every deterministic stationary policy (one action index per state) with
/// its expected per-domain return from the initial distribution.
pub fn enumerate_policies_oracle(
    mdp: &MultiDomainMDP,
    cap: usize,
) -> Result<Vec<(Vec<usize>, ValueVector)>, UtilityError> {
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let count = (na as f64).powi(ns as i32);
    if count > cap as f64 {
        return Err(UtilityError::CapExceeded { count, cap });
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut actions = vec![0usize; ns];
    loop {
        let mut pi = Array2::zeros((ns, na));
        for (s, &a) in actions.iter().enumerate() {
            pi[[s, a]] = 1.0;
        }
        let v = pmomdp::policy_value_exact(mdp, pi.view(), 0.0)?;
        out.push((actions.clone(), pmomdp::initial_value(mdp, &v)));
        // odometer increment, state 0 fastest
        let mut k = 0;
        loop {
            if k == ns {
                return Ok(out);
            }
            actions[k] += 1;
            if actions[k] < na {
                break;
            }
            actions[k] = 0;
            k += 1;
        }
    }
}
