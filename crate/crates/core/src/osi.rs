//! Online system identification: the exact Bayes filter over a discrete
//! domain set, and an ensemble of small regressors whose mean and spread form
//! a continuous belief, trained on the variational objective
//! `E_new[-ln D] + KL(new || old)`.

use ndarray::{Array1, Array2, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pmomdp::{self, MultiDomainMDP, PmomdpError, PROB_TOL};

#[derive(Debug, Error)]
pub enum OsiError {
    #[error("invalid belief: {0}")]
    Belief(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Model(#[from] PmomdpError),
}

/// Belief over domains: weights over a discrete set, or a mean and standard
/// deviation per kappa coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Posterior {
    Discrete { weights: Vec<f64> },
    MeanStd { mu: Vec<f64>, sigma: Vec<f64> },
}

impl Posterior {
    pub fn uniform(n: usize) -> Self {
        Posterior::Discrete {
            weights: vec![1.0 / n as f64; n],
        }
    }

    /// Mean and standard deviation of `U(lo, hi)` per coordinate.
    pub fn full_box(range: &[(f64, f64)]) -> Self {
        Posterior::MeanStd {
            mu: range.iter().map(|(l, h)| 0.5 * (l + h)).collect(),
            sigma: range.iter().map(|(l, h)| (h - l) / 12f64.sqrt()).collect(),
        }
    }

    pub fn validate(&self) -> Result<(), OsiError> {
        match self {
            Posterior::Discrete { weights } => {
                if weights.is_empty() || weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
                    return Err(OsiError::Belief(format!("weights {weights:?}")));
                }
                let sum: f64 = weights.iter().sum();
                if (sum - 1.0).abs() > PROB_TOL {
                    return Err(OsiError::Belief(format!("weights sum to {sum}")));
                }
            }
            Posterior::MeanStd { mu, sigma } => {
                if mu.len() != sigma.len() || mu.is_empty() {
                    return Err(OsiError::Belief("mu/sigma length".into()));
                }
                if mu.iter().chain(sigma).any(|v| !v.is_finite()) || sigma.iter().any(|s| *s < 0.0) {
                    return Err(OsiError::Belief(format!("mu {mu:?} sigma {sigma:?}")));
                }
            }
        }
        Ok(())
    }

    /// Shannon entropy of discrete weights; Gaussian differential entropy
    /// summed over coordinates for the mean/std form.
    pub fn entropy(&self) -> f64 {
        match self {
            Posterior::Discrete { weights } => pmomdp::entropy(weights),
            Posterior::MeanStd { sigma, .. } => sigma
                .iter()
                .map(|s| 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * s.max(1e-300).powi(2)).ln())
                .sum(),
        }
    }

    pub fn weights(&self) -> Option<&[f64]> {
        match self {
            Posterior::Discrete { weights } => Some(weights),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterStep {
    pub posterior: Posterior,
    /// Set when every likelihood was zero and the prior was kept.
    pub uninformative: bool,
}

/// `posterior ∝ P_k(s' | s, a) prior(k)` with the true kernels.
pub fn bayes_filter_step(
    prior: &Posterior,
    mdp: &MultiDomainMDP,
    s: usize,
    a: usize,
    s_next: usize,
) -> Result<FilterStep, OsiError> {
    prior.validate()?;
    let w = prior
        .weights()
        .ok_or_else(|| OsiError::Belief("exact filter needs discrete weights".into()))?;
    if w.len() != mdp.n_domains() {
        return Err(OsiError::Shape(format!("{} weights for {} domains", w.len(), mdp.n_domains())));
    }
    for (what, index, limit) in [("state", s, mdp.n_states), ("action", a, mdp.n_actions), ("state", s_next, mdp.n_states)] {
        if index >= limit {
            return Err(PmomdpError::IndexOutOfRange { what, index, limit }.into());
        }
    }
    let un: Vec<f64> = w
        .iter()
        .zip(&mdp.domains)
        .map(|(p, d)| p * d.transition[[s, a, s_next]])
        .collect();
    let z: f64 = un.iter().sum();
    if z <= 0.0 {
        log::warn!("transition ({s}, {a}, {s_next}) has zero likelihood under the prior; belief kept");
        return Ok(FilterStep {
            posterior: prior.clone(),
            uninformative: true,
        });
    }
    Ok(FilterStep {
        posterior: Posterior::Discrete {
            weights: un.into_iter().map(|u| u / z).collect(),
        },
        uninformative: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub domain: usize,
    pub s: usize,
    pub a: usize,
    pub s_next: usize,
}

/// Smoothed empirical next-state model per `(domain, state, action)`.
/// Between domains the kernel is interpolated linearly along the first kappa
/// coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsModel {
    /// `[domain, state, action, next state]`
    pub counts: Array4<f64>,
    pub pseudo_count: f64,
    /// First kappa coordinate of every domain.
    pub anchors: Vec<f64>,
}

pub const PSEUDO_COUNT: f64 = 0.1;

impl DynamicsModel {
    pub fn new(mdp: &MultiDomainMDP) -> Self {
        DynamicsModel {
            counts: Array4::zeros((mdp.n_domains(), mdp.n_states, mdp.n_actions, mdp.n_states)),
            pseudo_count: PSEUDO_COUNT,
            anchors: mdp.domains.iter().map(|d| d.kappa.first().copied().unwrap_or(0.0)).collect(),
        }
    }

    pub fn observe(&mut self, t: &Transition) {
        self.counts[[t.domain, t.s, t.a, t.s_next]] += 1.0;
    }

    pub fn prob(&self, domain: usize, s: usize, a: usize, s_next: usize) -> f64 {
        let ns = self.counts.dim().3;
        let row: f64 = (0..ns).map(|t| self.counts[[domain, s, a, t]]).sum();
        if row + self.pseudo_count <= 0.0 {
            // nothing observed and no smoothing: uniform
            return 1.0 / ns as f64;
        }
        (self.counts[[domain, s, a, s_next]] + self.pseudo_count) / (row + self.pseudo_count * ns as f64)
    }

    /// `D(s' | s, a, kappa)` and its derivative in `kappa`.
    pub fn prob_at(&self, kappa: f64, s: usize, a: usize, s_next: usize) -> (f64, f64) {
        let mut order: Vec<usize> = (0..self.anchors.len()).collect();
        order.sort_by(|&i, &j| self.anchors[i].total_cmp(&self.anchors[j]));
        let first = order[0];
        let last = *order.last().unwrap();
        if order.len() == 1 || kappa <= self.anchors[first] {
            return (self.prob(first, s, a, s_next), 0.0);
        }
        if kappa >= self.anchors[last] {
            return (self.prob(last, s, a, s_next), 0.0);
        }
        for pair in order.windows(2) {
            let (i, j) = (pair[0], pair[1]);
            let (x0, x1) = (self.anchors[i], self.anchors[j]);
            if kappa <= x1 && x1 > x0 {
                let (p0, p1) = (self.prob(i, s, a, s_next), self.prob(j, s, a, s_next));
                let slope = (p1 - p0) / (x1 - x0);
                return (p0 + slope * (kappa - x0), slope);
            }
        }
        (self.prob(last, s, a, s_next), 0.0)
    }
}

fn discrete_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| if *qi > 0.0 { pi * (pi / qi).ln() } else { f64::INFINITY })
        .sum()
}

/// `KL(N(mu1, s1) || N(mu0, s0))` with both deviations floored.
pub fn gaussian_kl(mu1: f64, s1: f64, mu0: f64, s0: f64, floor: f64) -> f64 {
    let (s1, s0) = (s1.max(floor), s0.max(floor));
    (s0 / s1).ln() + (s1 * s1 + (mu1 - mu0).powi(2)) / (2.0 * s0 * s0) - 0.5
}

/// Mean over the batch of `E_{k~new}[-ln D(s'|s,a,k)] + KL(new || old)`.
/// Discrete beliefs index the dynamics model's domains; mean/std beliefs take
/// the expectation at `mu ± sigma` on the first coordinate. Returns infinity
/// when a next state has zero probability under every domain with mass.
pub fn vae_loss(
    dynamics: &DynamicsModel,
    new: &[Posterior],
    old: &[Posterior],
    batch: &[Transition],
    sigma_floor: f64,
) -> Result<f64, OsiError> {
    if batch.is_empty() {
        return Err(OsiError::EmptyBatch);
    }
    if new.len() != batch.len() || old.len() != batch.len() {
        return Err(OsiError::Shape("beliefs and batch differ in length".into()));
    }
    let mut total = 0.0;
    for ((pn, po), t) in new.iter().zip(old).zip(batch) {
        pn.validate()?;
        po.validate()?;
        total += match (pn, po) {
            (Posterior::Discrete { weights: wn }, Posterior::Discrete { weights: wo }) => {
                let mut nll = 0.0;
                for (i, &w) in wn.iter().enumerate() {
                    if w > 0.0 {
                        let d = dynamics.prob(i, t.s, t.a, t.s_next);
                        nll += if d > 0.0 { -w * d.ln() } else { f64::INFINITY };
                    }
                }
                nll + discrete_kl(wn, wo)
            }
            (Posterior::MeanStd { mu: mn, sigma: sn }, Posterior::MeanStd { mu: mo, sigma: so }) => {
                let nll: f64 = [mn[0] - sn[0], mn[0] + sn[0]]
                    .iter()
                    .map(|&k| -dynamics.prob_at(k, t.s, t.a, t.s_next).0.ln())
                    .sum::<f64>()
                    / 2.0;
                let kl: f64 = (0..mn.len())
                    .map(|c| gaussian_kl(mn[c], sn[c], mo[c], so[c], sigma_floor))
                    .sum();
                nll + kl
            }
            _ => return Err(OsiError::Belief("mixed belief kinds".into())),
        };
    }
    Ok(total / batch.len() as f64)
}

/// Two-layer regressor with `tanh` hidden units. Its output `z` places the
/// estimate at `mu + sigma z` relative to the prior belief.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Regressor {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

pub const HIDDEN: usize = 32;

impl Regressor {
    fn new<R: Rng + ?Sized>(n_in: usize, n_out: usize, rng: &mut R) -> Self {
        let a1 = (3.0 / n_in as f64).sqrt();
        let a2 = (3.0 / HIDDEN as f64).sqrt();
        Regressor {
            w1: Array2::from_shape_fn((HIDDEN, n_in), |_| rng.gen_range(-a1..a1)),
            b1: Array1::from_shape_fn(HIDDEN, |_| rng.gen_range(-0.1..0.1)),
            w2: Array2::from_shape_fn((n_out, HIDDEN), |_| rng.gen_range(-a2..a2)),
            b2: Array1::zeros(n_out),
        }
    }

    /// Hidden activations and output logits.
    fn forward(&self, x: &Array1<f64>) -> (Array1<f64>, Array1<f64>) {
        let h = (self.w1.dot(x) + &self.b1).mapv(f64::tanh);
        let z = self.w2.dot(&h) + &self.b2;
        (h, z)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleOSI {
    pub members: Vec<Regressor>,
    pub range: Vec<(f64, f64)>,
    pub n_states: usize,
    pub n_actions: usize,
}

pub const DEFAULT_ENSEMBLE_SIZE: usize = 4;

impl EnsembleOSI {
    pub fn new<R: Rng + ?Sized>(
        n_states: usize,
        n_actions: usize,
        range: &[(f64, f64)],
        k: usize,
        rng: &mut R,
    ) -> Result<Self, OsiError> {
        if k == 0 || range.is_empty() || range.iter().any(|(l, h)| !(l < h)) {
            return Err(OsiError::Shape(format!("k = {k}, range {range:?}")));
        }
        let n_in = 2 * n_states + n_actions + 3 * range.len();
        Ok(EnsembleOSI {
            members: (0..k).map(|_| Regressor::new(n_in, range.len(), rng)).collect(),
            range: range.to_vec(),
            n_states,
            n_actions,
        })
    }

    pub fn k(&self) -> usize {
        self.members.len()
    }

    /// Floor on belief deviations: 1% of each box width.
    pub fn sigma_floor(&self) -> f64 {
        0.01 * self.range.iter().map(|(l, h)| h - l).fold(f64::INFINITY, f64::min)
    }

    fn features(&self, s: usize, a: usize, s_next: usize, mu: &[f64], sigma: &[f64]) -> Array1<f64> {
        let (ns, na) = (self.n_states, self.n_actions);
        let mut x = Array1::zeros(2 * ns + na + 3 * self.range.len());
        x[s] = 1.0;
        x[ns + a] = 1.0;
        x[ns + na + s_next] = 1.0;
        let off = 2 * ns + na;
        for (c, &(lo, hi)) in self.range.iter().enumerate() {
            let w = hi - lo;
            let sd = sigma[c].max(self.sigma_floor()) / w * 12f64.sqrt();
            x[off + 3 * c] = (mu[c] - lo) / w - 0.5;
            x[off + 3 * c + 1] = sd;
            x[off + 3 * c + 2] = sd.ln() / 3.0;
        }
        x
    }

    /// `mu + max(sigma, floor) z`, clipped to the box.
    fn place(&self, mu: &[f64], sigma: &[f64], z: &Array1<f64>) -> Vec<f64> {
        let floor = self.sigma_floor();
        self.range
            .iter()
            .enumerate()
            .map(|(c, &(lo, hi))| (mu[c] + sigma[c].max(floor) * z[c]).clamp(lo, hi))
            .collect()
    }

    /// Every member's kappa estimate.
    pub fn member_predictions(&self, s: usize, a: usize, s_next: usize, prior: &Posterior) -> Result<Vec<Vec<f64>>, OsiError> {
        let (mu, sigma) = self.prior_moments(prior)?;
        let x = self.features(s, a, s_next, mu, sigma);
        Ok(self.members.iter().map(|m| self.place(mu, sigma, &m.forward(&x).1)).collect())
    }

    fn prior_moments<'a>(&self, prior: &'a Posterior) -> Result<(&'a [f64], &'a [f64]), OsiError> {
        match prior {
            Posterior::MeanStd { mu, sigma } if mu.len() == self.range.len() => Ok((mu, sigma)),
            _ => Err(OsiError::Belief("ensemble needs a mean/std belief of matching dimension".into())),
        }
    }

    fn check_transition(&self, s: usize, a: usize, s_next: usize) -> Result<(), OsiError> {
        if s >= self.n_states || s_next >= self.n_states || a >= self.n_actions {
            return Err(OsiError::Shape(format!("transition ({s}, {a}, {s_next})")));
        }
        Ok(())
    }
}

/// Mean and population standard deviation of a set of predictions.
pub fn moments(preds: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let k = preds.len() as f64;
    let m = preds[0].len();
    let mu: Vec<f64> = (0..m).map(|c| preds.iter().map(|p| p[c]).sum::<f64>() / k).collect();
    let sigma = (0..m)
        .map(|c| (preds.iter().map(|p| (p[c] - mu[c]).powi(2)).sum::<f64>() / k).sqrt())
        .collect();
    (mu, sigma)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub posterior: Posterior,
    /// Fewer than two members: the deviation is reported as zero.
    pub single_member: bool,
}

/// `[mean_j f_j, std_j f_j]` over the members.
pub fn ensemble_predict(osi: &EnsembleOSI, s: usize, a: usize, s_next: usize, prior: &Posterior) -> Result<Prediction, OsiError> {
    osi.check_transition(s, a, s_next)?;
    prior.validate()?;
    let preds = osi.member_predictions(s, a, s_next, prior)?;
    let (mu, sigma) = moments(&preds);
    Ok(Prediction {
        posterior: Posterior::MeanStd { mu, sigma },
        single_member: osi.k() < 2,
    })
}

/// One stored step for training: the transition and the belief held before it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OsiSample {
    pub transition: Transition,
    pub prior_mu: Vec<f64>,
    pub prior_sigma: Vec<f64>,
}

impl OsiSample {
    fn prior(&self) -> Posterior {
        Posterior::MeanStd {
            mu: self.prior_mu.clone(),
            sigma: self.prior_sigma.clone(),
        }
    }
}

/// Training objective of the ensemble: the members' predictions stand in for
/// samples from the new belief, `mean_j -ln D(k_j) + KL(N(mean, std) || old)`.
pub fn ensemble_loss(osi: &EnsembleOSI, dynamics: &DynamicsModel, batch: &[OsiSample]) -> Result<f64, OsiError> {
    if batch.is_empty() {
        return Err(OsiError::EmptyBatch);
    }
    let floor = osi.sigma_floor();
    let mut total = 0.0;
    for smp in batch {
        let t = &smp.transition;
        let preds = osi.member_predictions(t.s, t.a, t.s_next, &smp.prior())?;
        let k = preds.len() as f64;
        let nll: f64 = preds.iter().map(|p| -dynamics.prob_at(p[0], t.s, t.a, t.s_next).0.ln()).sum::<f64>() / k;
        let (mu, sigma) = moments(&preds);
        let kl: f64 = (0..mu.len())
            .map(|c| gaussian_kl(mu[c], sigma[c], smp.prior_mu[c], smp.prior_sigma[c], floor))
            .sum();
        total += nll + kl;
    }
    Ok(total / batch.len() as f64)
}

/// Per-sample gradient clip on the loss derivative in kappa.
const GRAD_CLIP: f64 = 10.0;

/// One gradient step on a uniformly chosen member over the whole batch.
/// Returns the member index and the batch loss before the step.
pub fn ensemble_update<R: Rng + ?Sized>(
    osi: &mut EnsembleOSI,
    dynamics: &DynamicsModel,
    batch: &[OsiSample],
    learning_rate: f64,
    rng: &mut R,
) -> Result<(usize, f64), OsiError> {
    if batch.is_empty() {
        return Err(OsiError::EmptyBatch);
    }
    let j = rng.gen_range(0..osi.k());
    let floor = osi.sigma_floor();
    let kf = osi.k() as f64;
    let m = osi.range.len();
    let member = &osi.members[j];
    let mut g_w1 = Array2::<f64>::zeros(member.w1.dim());
    let mut g_b1 = Array1::<f64>::zeros(member.b1.len());
    let mut g_w2 = Array2::<f64>::zeros(member.w2.dim());
    let mut g_b2 = Array1::<f64>::zeros(m);
    let mut loss = 0.0;
    for smp in batch {
        let t = &smp.transition;
        osi.check_transition(t.s, t.a, t.s_next)?;
        let x = osi.features(t.s, t.a, t.s_next, &smp.prior_mu, &smp.prior_sigma);
        let outs: Vec<(Array1<f64>, Array1<f64>)> = osi.members.iter().map(|r| r.forward(&x)).collect();
        let preds: Vec<Vec<f64>> = outs
            .iter()
            .map(|(_, z)| osi.place(&smp.prior_mu, &smp.prior_sigma, z))
            .collect();
        let (mu, sigma) = moments(&preds);
        let mut dk = vec![0.0; m];
        for (c, d) in dk.iter_mut().enumerate() {
            let (s0, mu0) = (smp.prior_sigma[c].max(floor), smp.prior_mu[c]);
            let se = sigma[c].max(floor);
            loss += gaussian_kl(mu[c], sigma[c], mu0, smp.prior_sigma[c], floor);
            let d_mu = (mu[c] - mu0) / (s0 * s0);
            let d_sigma = if sigma[c] > floor { -1.0 / se + se / (s0 * s0) } else { 0.0 };
            *d = d_mu / kf;
            if sigma[c] > floor {
                *d += d_sigma * (preds[j][c] - mu[c]) / (kf * sigma[c]);
            }
        }
        for p in &preds {
            loss -= dynamics.prob_at(p[0], t.s, t.a, t.s_next).0.ln() / kf;
        }
        let (dval, dslope) = dynamics.prob_at(preds[j][0], t.s, t.a, t.s_next);
        dk[0] -= dslope / dval / kf;
        let (h, _) = &outs[j];
        for c in 0..m {
            let (lo, hi) = osi.range[c];
            let inside = preds[j][c] > lo && preds[j][c] < hi;
            let dz = if inside {
                (dk[c] * smp.prior_sigma[c].max(floor)).clamp(-GRAD_CLIP, GRAD_CLIP)
            } else {
                0.0
            };
            g_b2[c] += dz;
            for u in 0..HIDDEN {
                g_w2[[c, u]] += dz * h[u];
                let dh = dz * member.w2[[c, u]] * (1.0 - h[u] * h[u]);
                g_b1[u] += dh;
                for (i, xi) in x.iter().enumerate() {
                    if *xi != 0.0 {
                        g_w1[[u, i]] += dh * xi;
                    }
                }
            }
        }
    }
    let scale = learning_rate / batch.len() as f64;
    let member = &mut osi.members[j];
    member.w1.scaled_add(-scale, &g_w1);
    member.b1.scaled_add(-scale, &g_b1);
    member.w2.scaled_add(-scale, &g_w2);
    member.b2.scaled_add(-scale, &g_b2);
    Ok((j, loss / batch.len() as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OsiTrainConfig {
    pub ensemble_size: usize,
    pub transitions: usize,
    pub episode_len: usize,
    pub batch_size: usize,
    pub updates_per_transition: usize,
    pub learning_rate: f64,
}

impl Default for OsiTrainConfig {
    fn default() -> Self {
        OsiTrainConfig {
            ensemble_size: DEFAULT_ENSEMBLE_SIZE,
            transitions: 10_000,
            episode_len: 50,
            batch_size: 32,
            updates_per_transition: 4,
            learning_rate: 0.2,
        }
    }
}

/// Rolls a belief through one episode under uniformly random actions in
/// `domain`, returning the stored samples and the belief after every step.
pub fn belief_rollout<R: Rng + ?Sized>(
    osi: &EnsembleOSI,
    mdp: &MultiDomainMDP,
    domain: usize,
    steps: usize,
    rng: &mut R,
) -> Result<(Vec<OsiSample>, Vec<Posterior>), OsiError> {
    let mut belief = Posterior::full_box(&osi.range);
    let mut s = pmomdp::sample_initial(mdp, rng);
    let mut samples = Vec::with_capacity(steps);
    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        let a = rng.gen_range(0..mdp.n_actions);
        let (s_next, _) = pmomdp::sample_transition(mdp, domain, s, a, rng)?;
        let (mu, sigma) = match &belief {
            Posterior::MeanStd { mu, sigma } => (mu.clone(), sigma.clone()),
            _ => unreachable!(),
        };
        samples.push(OsiSample {
            transition: Transition { domain, s, a, s_next },
            prior_mu: mu,
            prior_sigma: sigma,
        });
        belief = ensemble_predict(osi, s, a, s_next, &belief)?.posterior;
        trace.push(belief.clone());
        s = s_next;
    }
    Ok((samples, trace))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OsiTrainLog {
    /// Loss of every update.
    pub losses: Vec<f64>,
    pub member_counts: Vec<usize>,
}

/// Online training: episodes in uniformly drawn domains with the belief
/// propagated by the current ensemble; after every collected transition the
/// dynamics counts absorb it and `updates_per_transition` minibatch steps run.
pub fn train_ensemble<R: Rng + ?Sized>(
    mdp: &MultiDomainMDP,
    range: &[(f64, f64)],
    config: &OsiTrainConfig,
    rng: &mut R,
) -> Result<(EnsembleOSI, DynamicsModel, OsiTrainLog), OsiError> {
    let mut osi = EnsembleOSI::new(mdp.n_states, mdp.n_actions, range, config.ensemble_size, rng)?;
    let mut dynamics = DynamicsModel::new(mdp);
    let mut buffer: Vec<OsiSample> = Vec::with_capacity(config.transitions);
    let mut log = OsiTrainLog {
        member_counts: vec![0; osi.k()],
        ..Default::default()
    };
    while buffer.len() < config.transitions {
        let domain = rng.gen_range(0..mdp.n_domains());
        let steps = config.episode_len.min(config.transitions - buffer.len());
        let (samples, _) = belief_rollout(&osi, mdp, domain, steps, rng)?;
        for smp in samples {
            dynamics.observe(&smp.transition);
            buffer.push(smp);
            for _ in 0..config.updates_per_transition {
                let batch: Vec<OsiSample> = (0..config.batch_size.min(buffer.len()))
                    .map(|_| buffer[rng.gen_range(0..buffer.len())].clone())
                    .collect();
                let (j, loss) = ensemble_update(&mut osi, &dynamics, &batch, config.learning_rate, rng)?;
                log.member_counts[j] += 1;
                log.losses.push(loss);
            }
        }
    }
    Ok((osi, dynamics, log))
}

/// Mean belief deviation on coordinate 0 after `steps` steps, over
/// `episodes` rollouts per domain.
pub fn final_belief_spread<R: Rng + ?Sized>(
    osi: &EnsembleOSI,
    mdp: &MultiDomainMDP,
    steps: usize,
    episodes: usize,
    rng: &mut R,
) -> Result<f64, OsiError> {
    let mut total = 0.0;
    let mut n = 0;
    for domain in 0..mdp.n_domains() {
        for _ in 0..episodes {
            let (_, trace) = belief_rollout(osi, mdp, domain, steps, rng)?;
            if let Some(Posterior::MeanStd { sigma, .. }) = trace.last() {
                total += sigma[0];
                n += 1;
            }
        }
    }
    Ok(total / n.max(1) as f64)
}
