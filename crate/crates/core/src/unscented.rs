//! Equal-weight sigma points matching the raw moments of `U(0, 1)`, and their
//! affine image for a uniform box preference.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pmomdp::Preference;

#[derive(Debug, Error)]
pub enum UnscentedError {
    #[error("degenerate interval: a = b = {0}")]
    Degenerate(f64),
    #[error("moment order must be at least 1")]
    Order,
    #[error("no convergence after {iterations} iterations; best residual {}", best.residual)]
    NotConverged {
        iterations: usize,
        best: Box<SigmaPointSet>,
    },
    #[error("expected a uniform box preference of dimension {0}")]
    Kind(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaPointSet {
    /// `n x d`, entries in `[0, 1]`.
    pub points: Array2<f64>,
    pub weights: Vec<f64>,
    pub moment_order: usize,
    pub residual: f64,
}

impl SigmaPointSet {
    pub fn n(&self) -> usize {
        self.points.nrows()
    }
    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    /// Equal-weight set from explicit points.
    pub fn from_points(points: Array2<f64>, moment_order: usize) -> Self {
        let n = points.nrows();
        let mut set = SigmaPointSet {
            points,
            weights: vec![1.0 / n as f64; n],
            moment_order,
            residual: 0.0,
        };
        set.residual = moment_residual(&set, moment_order);
        set
    }
}

#[derive(Clone, Debug)]
pub struct SolverConfig {
    pub learning_rate: f64,
    pub max_iter: usize,
    pub tolerance: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            learning_rate: 0.05,
            max_iter: 200_000,
            tolerance: 1e-6,
        }
    }
}

/// `(b^{k+1} - a^{k+1}) / ((k + 1)(b - a))`.
pub fn uniform_moment(k: u32, a: f64, b: f64) -> Result<f64, UnscentedError> {
    if a == b {
        return Err(UnscentedError::Degenerate(a));
    }
    Ok((b.powi(k as i32 + 1) - a.powi(k as i32 + 1)) / ((k as f64 + 1.0) * (b - a)))
}

/// Default order: `max(10, d)`.
pub fn default_moment_order(d: usize) -> usize {
    d.max(10)
}

/// Max over coordinates and `k <= order` of `|sum_i w_i S_i^k - 1/(k+1)|`.
pub fn moment_residual(set: &SigmaPointSet, order: usize) -> f64 {
    let mut worst = 0.0_f64;
    for col in set.points.columns() {
        let r = column_residuals(col.iter().copied(), &set.weights, order);
        worst = r.iter().fold(worst, |m, x| m.max(x.abs()));
    }
    worst
}

fn column_residuals(xs: impl Iterator<Item = f64>, w: &[f64], order: usize) -> Vec<f64> {
    let mut m = vec![0.0; order];
    for (x, wi) in xs.zip(w) {
        let mut p = 1.0;
        for mk in m.iter_mut() {
            p *= x;
            *mk += wi * p;
        }
    }
    m.iter()
        .enumerate()
        .map(|(k, mk)| mk - 1.0 / (k as f64 + 2.0))
        .collect()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Solves each coordinate independently: `n = 2d + 1` logits are fitted by
/// Adam on the squared moment mismatch. Points stay in `(0, 1)` by
/// construction.
pub fn solve_sigma_points<R: Rng + ?Sized>(
    d: usize,
    moment_order: usize,
    config: &SolverConfig,
    rng: &mut R,
) -> Result<SigmaPointSet, UnscentedError> {
    if moment_order == 0 {
        return Err(UnscentedError::Order);
    }
    let n = 2 * d + 1;
    let w = vec![1.0 / n as f64; n];
    let mut points = Array2::zeros((n, d));
    let mut all_converged = true;
    let mut iterations = 0;
    for c in 0..d {
        let init: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let (xs, converged, it) = solve_column(init, &w, moment_order, config);
        all_converged &= converged;
        iterations = iterations.max(it);
        for (i, x) in xs.into_iter().enumerate() {
            points[[i, c]] = x;
        }
    }
    let set = SigmaPointSet::from_points(points, moment_order);
    if all_converged && set.residual <= config.tolerance {
        Ok(set)
    } else {
        Err(UnscentedError::NotConverged {
            iterations,
            best: Box::new(set),
        })
    }
}

fn solve_column(mut z: Vec<f64>, w: &[f64], order: usize, config: &SolverConfig) -> (Vec<f64>, bool, usize) {
    let n = z.len();
    let (b1, b2, eps) = (0.9, 0.999, 1e-12);
    let mut m1 = vec![0.0; n];
    let mut m2 = vec![0.0; n];
    let mut best = (f64::INFINITY, z.clone());
    for t in 1..=config.max_iter {
        let xs: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
        let res = column_residuals(xs.iter().copied(), w, order);
        let worst = res.iter().fold(0.0_f64, |m, r| m.max(r.abs()));
        if worst < best.0 {
            best = (worst, z.clone());
        }
        if worst <= config.tolerance {
            return (xs, true, t);
        }
        let lr = config.learning_rate / (1.0 + t as f64 / 1000.0).sqrt();
        for i in 0..n {
            // d/dx sum_k r_k^2 = sum_k 2 r_k w_i k x^{k-1}
            let x = xs[i];
            let mut g = 0.0;
            let mut p = 1.0;
            for (k, r) in res.iter().enumerate() {
                g += 2.0 * r * w[i] * (k as f64 + 1.0) * p;
                p *= x;
            }
            g *= x * (1.0 - x);
            m1[i] = b1 * m1[i] + (1.0 - b1) * g;
            m2[i] = b2 * m2[i] + (1.0 - b2) * g * g;
            let mh = m1[i] / (1.0 - b1.powi(t.min(10_000) as i32));
            let vh = m2[i] / (1.0 - b2.powi(t.min(10_000) as i32));
            z[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    let xs = best.1.iter().map(|&v| sigmoid(v)).collect();
    (xs, false, config.max_iter)
}

/// Image of the unit-cube points under `mu + 2 sqrt(3) sigma (S - 1/2)`, which
/// maps `[0, 1]` onto the support `[mu - sqrt(3) sigma, mu + sqrt(3) sigma]`.
pub fn map_sigma_points(set: &SigmaPointSet, pref: &Preference) -> Result<Array2<f64>, UnscentedError> {
    let (mu, sigma) = match pref {
        Preference::UniformBox { mu, sigma } if mu.len() == set.dim() => (mu, sigma),
        _ => return Err(UnscentedError::Kind(set.dim())),
    };
    let scale = 2.0 * 3f64.sqrt();
    let mut out = set.points.clone();
    for ((_, c), v) in out.indexed_iter_mut() {
        *v = mu[c] + scale * sigma[c] * (*v - 0.5);
    }
    Ok(out)
}

/// Best available set: the converged result or the best iterate on failure.
pub fn solve_or_best<R: Rng + ?Sized>(
    d: usize,
    moment_order: usize,
    config: &SolverConfig,
    rng: &mut R,
) -> (SigmaPointSet, bool) {
    match solve_sigma_points(d, moment_order, config, rng) {
        Ok(s) => (s, true),
        Err(UnscentedError::NotConverged { best, .. }) => (*best, false),
        Err(e) => panic!("sigma point solver: {e}"),
    }
}
