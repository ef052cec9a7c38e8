//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use mdrl::pmomdp::{DomainSpec, MultiDomainMDP};
use ndarray::{Array1, Array2, Array3};
use rand::Rng;

/// Random MDP with dense kernels; every row has strictly positive mass on at
/// least one state.
pub fn random_mdp<R: Rng>(rng: &mut R, nd: usize, ns: usize, na: usize, gamma: f64) -> MultiDomainMDP {
    let domains = (0..nd)
        .map(|i| {
            let mut transition = Array3::zeros((ns, na, ns));
            for s in 0..ns {
                for a in 0..na {
                    let raw: Vec<f64> = (0..ns)
                        .map(|_| if rng.gen_bool(0.6) { rng.gen_range(0.05..1.0) } else { 0.0 })
                        .collect();
                    let mut raw = raw;
                    if raw.iter().all(|&x| x == 0.0) {
                        raw[rng.gen_range(0..ns)] = 1.0;
                    }
                    let z: f64 = raw.iter().sum();
                    for t in 0..ns {
                        transition[[s, a, t]] = raw[t] / z;
                    }
                }
            }
            let reward = Array2::from_shape_fn((ns, na), |_| rng.gen_range(-1.0..1.0));
            DomainSpec {
                kappa: vec![i as f64],
                transition,
                reward,
            }
        })
        .collect();
    let mut initial = Array1::zeros(ns);
    initial[0] = 1.0;
    MultiDomainMDP {
        n_states: ns,
        n_actions: na,
        domains,
        gamma,
        initial,
    }
}

/// Soft policy evaluation by fixed-point sweeps until the change is below
/// 1e-14; returns `[domain, state]`.
pub fn iterative_values(mdp: &MultiDomainMDP, policy: &Array2<f64>, alpha: f64) -> Array2<f64> {
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let mut v = Array2::<f64>::zeros((mdp.n_domains(), ns));
    loop {
        let mut next = v.clone();
        for (i, d) in mdp.domains.iter().enumerate() {
            for s in 0..ns {
                let mut total = 0.0;
                for a in 0..na {
                    let p = policy[[s, a]];
                    if p <= 0.0 {
                        continue;
                    }
                    let ev: f64 = (0..ns).map(|t| d.transition[[s, a, t]] * v[[i, t]]).sum();
                    total += p * (d.reward[[s, a]] - alpha * p.ln() + mdp.gamma * ev);
                }
                next[[i, s]] = total;
            }
        }
        let diff = next.iter().zip(v.iter()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        v = next;
        if diff < 1e-14 {
            return v;
        }
    }
}

pub fn initial_values(mdp: &MultiDomainMDP, v: &Array2<f64>) -> Vec<f64> {
    (0..mdp.n_domains())
        .map(|i| (0..mdp.n_states).map(|s| mdp.initial[s] * v[[i, s]]).sum())
        .collect()
}

/// Soft value iteration on one domain; returns `Q[s, a]`.
pub fn soft_value_iteration(mdp: &MultiDomainMDP, domain: usize, alpha: f64) -> Array2<f64> {
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let d = &mdp.domains[domain];
    let mut q = Array2::<f64>::zeros((ns, na));
    loop {
        let v: Vec<f64> = (0..ns)
            .map(|s| {
                let m = (0..na).map(|a| q[[s, a]]).fold(f64::NEG_INFINITY, f64::max);
                m + alpha * (0..na).map(|a| ((q[[s, a]] - m) / alpha).exp()).sum::<f64>().ln()
            })
            .collect();
        let next = Array2::from_shape_fn((ns, na), |(s, a)| {
            d.reward[[s, a]] + mdp.gamma * (0..ns).map(|t| d.transition[[s, a, t]] * v[t]).sum::<f64>()
        });
        let diff = next.iter().zip(q.iter()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        q = next;
        if diff < 1e-13 {
            return q;
        }
    }
}

/// Monte-Carlo discounted return of `policy` in `domain` with `episodes`
/// episodes of `horizon` steps; returns mean and standard error.
pub fn monte_carlo<R: Rng>(
    mdp: &MultiDomainMDP,
    domain: usize,
    policy: &Array2<f64>,
    episodes: usize,
    horizon: usize,
    rng: &mut R,
) -> (f64, f64) {
    let draw = |probs: &[f64], rng: &mut R| {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (k, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return k;
            }
        }
        probs.len() - 1
    };
    let d = &mdp.domains[domain];
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut s = draw(mdp.initial.as_slice().unwrap(), rng);
        let (mut g, mut disc) = (0.0, 1.0);
        for _ in 0..horizon {
            let a = draw(&policy.row(s).to_vec(), rng);
            g += disc * d.reward[[s, a]];
            disc *= mdp.gamma;
            s = draw(&d.transition.slice(ndarray::s![s, a, ..]).to_vec(), rng);
        }
        returns.push(g);
    }
    let n = episodes as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Weak Pareto dominance by pairwise comparison.
pub fn dominated_by(a: &[f64], b: &[f64]) -> bool {
    b.iter().zip(a).all(|(x, y)| x >= y) && b.iter().zip(a).any(|(x, y)| x > y)
}

/// Indices not weakly dominated by any other vector.
pub fn pcs_oracle(values: &[Vec<f64>]) -> Vec<usize> {
    (0..values.len())
        .filter(|&i| !(0..values.len()).any(|j| j != i && dominated_by(&values[i], &values[j])))
        .collect()
}

/// Indices lying on the upper-right convex hull of 2-D points: the points
/// that maximize `w x + (1 - w) y` for some `w` in `[0, 1]`, including all
/// duplicates of such points.
pub fn upper_hull_oracle(values: &[Vec<f64>]) -> Vec<usize> {
    let mut pts: Vec<(f64, f64)> = values.iter().map(|v| (v[0], v[1])).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    // monotone chain upper hull
    let mut hull: Vec<(f64, f64)> = Vec::new();
    for p in pts {
        while hull.len() >= 2 {
            let (o, a) = (hull[hull.len() - 2], hull[hull.len() - 1]);
            let cross = (a.0 - o.0) * (p.1 - o.1) - (a.1 - o.1) * (p.0 - o.0);
            if cross >= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(p);
    }
    // keep the part reachable by nonnegative weights: from the highest y to
    // the highest x
    let top = hull
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, by), (i, p)| if p.1 >= by { (i, p.1) } else { (bi, by) })
        .0;
    let keep: Vec<(f64, f64)> = hull[top..].to_vec();
    (0..values.len())
        .filter(|&i| keep.contains(&(values[i][0], values[i][1])))
        .collect()
}
