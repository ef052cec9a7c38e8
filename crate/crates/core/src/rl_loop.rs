//! Sample-based training skeleton with tabular twin critics, replay, Polyak
//! targets and one TD-target rule per algorithm.
//!
//! Critic tables are indexed `[critic cell, domain, state, action]` and the
//! policy `[policy cell, state, action]`. Conditioned algorithms use one
//! critic cell per grid cell; the utopia algorithms and plain domain
//! randomization keep a single critic cell.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, Array4};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dp_solvers::{self, argmax_lowest};
use crate::osi::{bayes_filter_step, OsiError, Posterior};
use crate::pmomdp::{self, MultiDomainMDP, PmomdpError, Preference, PreferenceGrid};
use crate::seeding;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("unknown algorithm {0:?}")]
    UnknownAlgo(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Model(#[from] PmomdpError),
    #[error(transparent)]
    Osi(#[from] OsiError),
    #[error(transparent)]
    Solver(#[from] dp_solvers::DpError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algo {
    Drsac,
    Sirsa,
    Cmdsac,
    Emdsac,
    Umdsirsa,
    Umdsac1,
    Umdsac2,
}

impl Algo {
    pub const ALL: [Algo; 7] = [
        Algo::Drsac,
        Algo::Sirsa,
        Algo::Cmdsac,
        Algo::Emdsac,
        Algo::Umdsirsa,
        Algo::Umdsac1,
        Algo::Umdsac2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algo::Drsac => "drsac",
            Algo::Sirsa => "sirsa",
            Algo::Cmdsac => "cmdsac",
            Algo::Emdsac => "emdsac",
            Algo::Umdsirsa => "umdsirsa",
            Algo::Umdsac1 => "umdsac1",
            Algo::Umdsac2 => "umdsac2",
        }
    }

    /// Belief propagated by the filter during episodes.
    pub fn uses_osi(self) -> bool {
        matches!(self, Algo::Sirsa | Algo::Umdsirsa)
    }

    /// Critic conditioned on the preference cell.
    pub fn conditioned_critic(self) -> bool {
        matches!(self, Algo::Sirsa | Algo::Cmdsac | Algo::Emdsac)
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algo {
    type Err = TrainError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Algo::ALL
            .iter()
            .copied()
            .find(|a| a.name() == s)
            .ok_or_else(|| TrainError::UnknownAlgo(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub algo: Algo,
    pub total_steps: usize,
    pub warmup: usize,
    pub batch_size: usize,
    pub polyak: f64,
    pub alpha: f64,
    /// Grid resolution; `None` picks the default for the domain count.
    pub resolution: Option<usize>,
    pub seed: u64,
    pub sirsa_subsets: usize,
    /// Range of subset widths as a fraction of the full box.
    pub sirsa_width: (f64, f64),
    pub capacity: usize,
    pub episode_len: usize,
    pub learning_rate: f64,
    /// Drop the `-alpha ln pi` term from TD targets.
    pub literal_target: bool,
    /// Factor applied to a cell's visit counts at the start of each of its
    /// episodes.
    pub posterior_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            algo: Algo::Cmdsac,
            total_steps: 200_000,
            warmup: 2_000,
            batch_size: 256,
            polyak: 0.005,
            alpha: 0.05,
            resolution: None,
            seed: 0,
            sirsa_subsets: 100,
            sirsa_width: (0.25, 1.0),
            capacity: 100_000,
            episode_len: 50,
            learning_rate: 0.1,
            literal_target: false,
            posterior_decay: 0.99,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.warmup > self.total_steps {
            return bad(format!("warmup {} > total steps {}", self.warmup, self.total_steps));
        }
        if !(self.polyak > 0.0 && self.polyak <= 1.0) {
            return bad(format!("polyak {}", self.polyak));
        }
        if self.batch_size == 0 || self.capacity == 0 || self.episode_len == 0 {
            return bad("batch size, capacity and episode length must be positive".into());
        }
        if !(self.alpha > 0.0) || !(self.learning_rate > 0.0) {
            return bad(format!("alpha {} learning rate {}", self.alpha, self.learning_rate));
        }
        let (lo, hi) = self.sirsa_width;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return bad(format!("sirsa width range {lo}..{hi}"));
        }
        if !(self.posterior_decay > 0.0 && self.posterior_decay <= 1.0) {
            return bad(format!("posterior decay {}", self.posterior_decay));
        }
        if self.algo.uses_osi() && self.sirsa_subsets == 0 {
            return bad("sirsa needs at least one subset".into());
        }
        Ok(())
    }
}

/// One stored step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
    pub domain: usize,
    /// Preference cell the action was conditioned on.
    pub cell: usize,
    /// Preference cell after the belief update (equal to `cell` without OSI).
    pub next_cell: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    pub capacity: usize,
    items: Vec<Item>,
    head: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 20)),
            head: 0,
        }
    }

    pub fn push(&mut self, item: Item) {
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            self.items[self.head] = item;
        }
        self.head = (self.head + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    /// Up to `n` distinct stored items.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Item> {
        let n = n.min(self.items.len());
        index::sample(rng, self.items.len(), n)
            .into_iter()
            .map(|i| self.items[i])
            .collect()
    }
}

/// Twin online and target tables `[critic cell, domain, state, action]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Critics {
    pub online: [Array4<f64>; 2],
    pub target: [Array4<f64>; 2],
    /// Updates applied to every entry, for the learning-rate schedule.
    pub updates: Array4<f64>,
}

impl Critics {
    pub fn zeros(cells: usize, domains: usize, states: usize, actions: usize) -> Self {
        let z = Array4::zeros((cells, domains, states, actions));
        Critics {
            online: [z.clone(), z.clone()],
            target: [z.clone(), z.clone()],
            updates: z,
        }
    }

    pub fn min_online(&self, idx: [usize; 4]) -> f64 {
        self.online[0][idx].min(self.online[1][idx])
    }

    pub fn min_target(&self, idx: [usize; 4]) -> f64 {
        self.target[0][idx].min(self.target[1][idx])
    }
}

/// Discounted visit counts `[policy cell, domain, state]` from the replay
/// stream; normalised over domains they give the posterior over domains at a
/// state visited under a cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayPosterior {
    pub counts: Array3<f64>,
}

impl ReplayPosterior {
    pub fn new(cells: usize, domains: usize, states: usize) -> Self {
        ReplayPosterior {
            counts: Array3::zeros((cells, domains, states)),
        }
    }

    pub fn decay(&mut self, cell: usize, factor: f64) {
        self.counts.index_axis_mut(ndarray::Axis(0), cell).mapv_inplace(|v| v * factor);
    }

    pub fn record(&mut self, cell: usize, domain: usize, s: usize, weight: f64) {
        self.counts[[cell, domain, s]] += weight;
    }

    /// Posterior weights at `(s, cell)`; the cell's own weights where nothing
    /// has been recorded.
    pub fn weights(&self, cell: usize, s: usize, prior: &[f64]) -> Vec<f64> {
        let nd = prior.len();
        let total: f64 = (0..nd).map(|i| self.counts[[cell, i, s]]).sum();
        if total <= 0.0 {
            return prior.to_vec();
        }
        (0..nd).map(|i| self.counts[[cell, i, s]] / total).collect()
    }
}

/// Read-only context for target computation.
pub struct TargetContext<'a> {
    pub algo: Algo,
    pub grid: &'a PreferenceGrid,
    pub delta_cells: &'a [usize],
    pub alpha: f64,
    pub gamma: f64,
    pub entropy: bool,
}

/// Critic cell that conditions values for a policy cell.
pub fn critic_cell(algo: Algo, cell: usize) -> usize {
    if algo.conditioned_critic() {
        cell
    } else {
        0
    }
}

fn soft_row(critics: &Critics, policy: &Array3<f64>, q_cell: usize, domain: usize, p_cell: usize, s: usize, alpha: f64, entropy: bool) -> f64 {
    let na = policy.dim().2;
    (0..na)
        .map(|a| {
            let p = policy[[p_cell, s, a]];
            if p <= 0.0 {
                return 0.0;
            }
            let bonus = if entropy { -alpha * p.ln() } else { 0.0 };
            p * (critics.min_target([q_cell, domain, s, a]) + bonus)
        })
        .sum()
}

/// `(critic cell, policy cell)` supplying the next-state backup of `item`.
pub fn next_cells(ctx: &TargetContext, item: &Item, critics: &Critics, policy: &Array3<f64>) -> (usize, usize) {
    let alpha = ctx.alpha;
    let nc = policy.dim().0;
    match ctx.algo {
        Algo::Drsac => (0, 0),
        Algo::Cmdsac => (item.cell, item.cell),
        Algo::Sirsa => (item.next_cell, item.next_cell),
        Algo::Umdsirsa => (0, item.next_cell),
        Algo::Umdsac1 => (0, ctx.delta_cells[item.domain]),
        Algo::Emdsac => {
            // candidate cells scored with their own tables under the query's weights
            let w = &ctx.grid.cells[item.cell];
            let values: Vec<f64> = (0..nc)
                .map(|c| {
                    (0..w.len())
                        .map(|i| w[i] * soft_row(critics, policy, c, i, c, item.s_next, alpha, true))
                        .sum()
                })
                .collect();
            let k = argmax_lowest(&values);
            (k, k)
        }
        Algo::Umdsac2 => {
            let values: Vec<f64> = (0..nc)
                .map(|c| soft_row(critics, policy, 0, item.domain, c, item.s_next, alpha, true))
                .collect();
            (0, argmax_lowest(&values))
        }
    }
}

/// `r + gamma sum_a' pi(a'|s') [min_j Qbar_j(s', a') - alpha ln pi(a'|s')]`
/// with the variant's next cells; the entropy term is dropped when
/// `ctx.entropy` is false.
pub fn td_target(ctx: &TargetContext, item: &Item, critics: &Critics, policy: &Array3<f64>) -> f64 {
    let (q_cell, p_cell) = next_cells(ctx, item, critics, policy);
    item.r + ctx.gamma * soft_row(critics, policy, q_cell, item.domain, p_cell, item.s_next, ctx.alpha, ctx.entropy)
}

/// Tabular step on the squared TD error for both critics. Items hitting the
/// same entry are averaged; the step size at an entry is
/// `learning_rate / sqrt(updates so far)`. Returns the mean loss per critic.
pub fn critic_update(
    critics: &mut Critics,
    algo: Algo,
    batch: &[Item],
    targets: &[f64],
    learning_rate: f64,
    decay: bool,
) -> Result<[f64; 2], TrainError> {
    if batch.len() != targets.len() {
        return Err(TrainError::Shape(format!("{} items, {} targets", batch.len(), targets.len())));
    }
    if batch.is_empty() {
        return Ok([0.0, 0.0]);
    }
    let shape = critics.updates.dim();
    let mut sum = [Array4::<f64>::zeros(shape), Array4::<f64>::zeros(shape)];
    let mut hits = Array4::<f64>::zeros(shape);
    let mut touched = Vec::new();
    let mut loss = [0.0; 2];
    for (item, &y) in batch.iter().zip(targets) {
        let idx = [critic_cell(algo, item.cell), item.domain, item.s, item.a];
        if hits[idx] == 0.0 {
            touched.push(idx);
        }
        hits[idx] += 1.0;
        for j in 0..2 {
            let e = y - critics.online[j][idx];
            sum[j][idx] += e;
            loss[j] += e * e;
        }
    }
    for idx in touched {
        critics.updates[idx] += 1.0;
        let lr = if decay {
            learning_rate / critics.updates[idx].sqrt()
        } else {
            learning_rate
        };
        for j in 0..2 {
            critics.online[j][idx] += lr * sum[j][idx] / hits[idx];
        }
    }
    let n = batch.len() as f64;
    Ok([loss[0] / n, loss[1] / n])
}

/// Exact projection `pi(.|s, c) = soft_policy(sum_i b_i(s; c) min_j Q_j(s, ., i))`
/// at every `(s, c)` in the batch. Returns the mean soft objective after the
/// update over the distinct pairs.
pub fn actor_update(
    policy: &mut Array3<f64>,
    critics: &Critics,
    algo: Algo,
    grid: &PreferenceGrid,
    posterior: &ReplayPosterior,
    pairs: &[(usize, usize)],
    alpha: f64,
) -> Result<f64, TrainError> {
    let (nc, ns, na) = policy.dim();
    let mut seen = Array2::<bool>::from_elem((nc, ns), false);
    let mut objective = 0.0;
    let mut count = 0;
    for &(c, s) in pairs {
        if seen[[c, s]] {
            continue;
        }
        seen[[c, s]] = true;
        let b = posterior.weights(c, s, &grid.cells[c]);
        let qc = critic_cell(algo, c);
        let qbar: Vec<f64> = (0..na)
            .map(|a| (0..b.len()).map(|i| b[i] * critics.min_online([qc, i, s, a])).sum())
            .collect();
        let p = dp_solvers::soft_policy(&qbar, alpha)?;
        objective += (0..na)
            .filter(|&a| p[a] > 0.0)
            .map(|a| p[a] * (qbar[a] - alpha * p[a].ln()))
            .sum::<f64>();
        count += 1;
        for a in 0..na {
            policy[[c, s, a]] = p[a];
        }
    }
    Ok(if count > 0 { objective / count as f64 } else { 0.0 })
}

/// `target <- tau online + (1 - tau) target` elementwise.
pub fn polyak_update(target: &mut Array4<f64>, online: &Array4<f64>, tau: f64) -> Result<(), TrainError> {
    if target.dim() != online.dim() {
        return Err(TrainError::Shape(format!("{:?} vs {:?}", target.dim(), online.dim())));
    }
    target.zip_mut_with(online, |t, &o| *t = tau * o + (1.0 - tau) * *t);
    Ok(())
}

/// `B` uniform boxes inside `range`: per coordinate a width fraction drawn
/// from `width`, then a uniformly placed centre.
pub fn sirsa_sample_subsets<R: Rng + ?Sized>(
    range: &[(f64, f64)],
    b: usize,
    width: (f64, f64),
    rng: &mut R,
) -> Result<Vec<Preference>, TrainError> {
    if b == 0 {
        return Err(TrainError::Config("zero subsets".into()));
    }
    let mut out = Vec::with_capacity(b);
    for _ in 0..b {
        let mut mu = Vec::with_capacity(range.len());
        let mut sigma = Vec::with_capacity(range.len());
        for &(lo, hi) in range {
            let f = if width.0 < width.1 { rng.gen_range(width.0..=width.1) } else { width.0 };
            let w = f * (hi - lo);
            let start = if hi - lo - w > 0.0 { rng.gen_range(lo..=hi - w) } else { lo };
            mu.push(start + 0.5 * w);
            sigma.push(w / 12f64.sqrt());
        }
        out.push(Preference::uniform_box(mu, sigma, range)?);
    }
    Ok(out)
}

/// Weights over the mdp's domains for a box: equal mass on domains whose
/// kappa lies in the support, otherwise all mass on the domain nearest the
/// centre.
pub fn box_domain_weights(mdp: &MultiDomainMDP, pref: &Preference) -> Result<Vec<f64>, TrainError> {
    let (mu, sigma) = match pref {
        Preference::UniformBox { mu, sigma } => (mu, sigma),
        other => return Ok(other.weights(mdp.n_domains())?),
    };
    let half: Vec<f64> = sigma.iter().map(|s| 3f64.sqrt() * s).collect();
    let inside: Vec<bool> = mdp
        .domains
        .iter()
        .map(|d| {
            d.kappa.len() >= mu.len()
                && (0..mu.len()).all(|c| (d.kappa[c] - mu[c]).abs() <= half[c] + pmomdp::PROB_TOL)
        })
        .collect();
    let n_in = inside.iter().filter(|&&x| x).count();
    if n_in > 0 {
        return Ok(inside.iter().map(|&x| if x { 1.0 / n_in as f64 } else { 0.0 }).collect());
    }
    let dist: Vec<f64> = mdp
        .domains
        .iter()
        .map(|d| -(0..mu.len()).map(|c| (d.kappa.get(c).copied().unwrap_or(0.0) - mu[c]).powi(2)).sum::<f64>())
        .collect();
    let k = argmax_lowest(&dist);
    let mut w = vec![0.0; mdp.n_domains()];
    w[k] = 1.0;
    Ok(w)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    /// Global step count at the end of the episode.
    pub step: usize,
    pub episode: usize,
    /// Discounted return of the episode.
    pub ret: f64,
    pub critic_loss: f64,
    pub actor_objective: f64,
    /// Entropy of the conditioning belief at the end of the episode.
    pub osi_entropy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub algo: Algo,
    /// Cells the policy is conditioned on (a single uniform cell for
    /// domain randomization).
    pub grid: PreferenceGrid,
    /// `[cell, state, action]`
    pub policy: Array3<f64>,
    pub critics: Critics,
    pub metrics: Vec<EpisodeMetrics>,
    pub updates: usize,
}

impl TrainResult {
    /// Policy table used for preference weights `w`: the nearest cell.
    pub fn policy_for(&self, w: &[f64]) -> ndarray::ArrayView2<'_, f64> {
        let c = self.grid.nearest(w);
        self.policy.index_axis(ndarray::Axis(0), c)
    }

    /// Soft scalarized value at every cell of `grid` of the policy the
    /// trained tables use for that cell.
    pub fn grid_values(&self, mdp: &MultiDomainMDP, grid: &PreferenceGrid, alpha: f64) -> Result<Vec<f64>, TrainError> {
        grid.cells
            .iter()
            .map(|w| Ok(pmomdp::scalarized_value(mdp, self.policy_for(w), w, alpha)?))
            .collect()
    }
}

fn sample_weights<R: Rng + ?Sized>(w: &[f64], rng: &mut R) -> usize {
    pmomdp::sample_categorical(w.iter().copied(), rng)
}

/// Runs the training skeleton: per-episode preference and domain sampling,
/// warmup with uniform actions, then one critic step, one actor projection
/// and one Polyak step per environment step.
pub fn run_training(mdp: &MultiDomainMDP, range: &[(f64, f64)], config: &TrainConfig) -> Result<TrainResult, TrainError> {
    config.validate()?;
    let algo = config.algo;
    let (nd, ns, na) = (mdp.n_domains(), mdp.n_states, mdp.n_actions);
    let grid = if algo == Algo::Drsac {
        PreferenceGrid::from_cells(vec![vec![1.0 / nd as f64; nd]])?
    } else {
        let r = config.resolution.unwrap_or_else(|| PreferenceGrid::default_resolution(nd));
        PreferenceGrid::simplex(nd, r)?
    };
    let nc = grid.len();
    let delta_cells: Vec<usize> = if algo == Algo::Drsac {
        vec![0; nd]
    } else {
        (0..nd)
            .map(|i| grid.delta_index(i).ok_or(dp_solvers::DpError::MissingDelta(i)))
            .collect::<Result<_, _>>()?
    };
    let q_cells = if algo.conditioned_critic() { nc } else { 1 };
    let mut rng = seeding::stream(config.seed, seeding::streams::TRAINING);
    let subsets = if algo.uses_osi() {
        let mut srng = seeding::stream(config.seed, seeding::streams::SIRSA);
        let boxes = sirsa_sample_subsets(range, config.sirsa_subsets, config.sirsa_width, &mut srng)?;
        boxes
            .iter()
            .map(|p| box_domain_weights(mdp, p))
            .collect::<Result<Vec<_>, _>>()?
    } else {
        Vec::new()
    };
    let mut critics = Critics::zeros(q_cells, nd, ns, na);
    let mut policy = Array3::from_elem((nc, ns, na), 1.0 / na as f64);
    let mut posterior = ReplayPosterior::new(nc, nd, ns);
    let mut replay = ReplayBuffer::new(config.capacity);
    let mut metrics = Vec::new();
    let mut updates = 0;
    let mut step = 0;
    let mut episode = 0;
    let ctx = TargetContext {
        algo,
        grid: &grid,
        delta_cells: &delta_cells,
        alpha: config.alpha,
        gamma: mdp.gamma,
        entropy: !config.literal_target,
    };
    while step < config.total_steps {
        let (mut belief, domain) = if algo.uses_osi() {
            let w = subsets[rng.gen_range(0..subsets.len())].clone();
            let d = sample_weights(&w, &mut rng);
            (w, d)
        } else {
            let c = if nc == 1 { 0 } else { rng.gen_range(0..nc) };
            let d = sample_weights(&grid.cells[c], &mut rng);
            (grid.cells[c].clone(), d)
        };
        let mut cell = grid.nearest(&belief);
        posterior.decay(cell, config.posterior_decay);
        let mut s = pmomdp::sample_initial(mdp, &mut rng);
        let (mut ret, mut disc) = (0.0, 1.0);
        let (mut loss_sum, mut obj_sum, mut n_upd) = (0.0, 0.0, 0usize);
        for t in 0..config.episode_len {
            if step >= config.total_steps {
                break;
            }
            let a = if step < config.warmup {
                rng.gen_range(0..na)
            } else {
                pmomdp::sample_categorical((0..na).map(|a| policy[[cell, s, a]]), &mut rng)
            };
            let (s_next, r) = pmomdp::sample_transition(mdp, domain, s, a, &mut rng)?;
            posterior.record(cell, domain, s, mdp.gamma.powi(t as i32));
            let next_cell = if algo.uses_osi() {
                let prior = Posterior::Discrete { weights: belief.clone() };
                belief = bayes_filter_step(&prior, mdp, s, a, s_next)?
                    .posterior
                    .weights()
                    .map(<[f64]>::to_vec)
                    .unwrap_or(belief);
                grid.nearest(&belief)
            } else {
                cell
            };
            replay.push(Item {
                s,
                a,
                r,
                s_next,
                domain,
                cell,
                next_cell,
            });
            ret += disc * r;
            disc *= mdp.gamma;
            step += 1;
            if step > config.warmup {
                let batch = replay.sample(config.batch_size, &mut rng);
                let targets: Vec<f64> = batch.iter().map(|it| td_target(&ctx, it, &critics, &policy)).collect();
                let l = critic_update(&mut critics, algo, &batch, &targets, config.learning_rate, true)?;
                let pairs: Vec<(usize, usize)> = batch
                    .iter()
                    .map(|it| if algo.uses_osi() { (it.next_cell, it.s) } else { (it.cell, it.s) })
                    .collect();
                let obj = actor_update(&mut policy, &critics, algo, &grid, &posterior, &pairs, config.alpha)?;
                for j in 0..2 {
                    let online = critics.online[j].clone();
                    polyak_update(&mut critics.target[j], &online, config.polyak)?;
                }
                loss_sum += 0.5 * (l[0] + l[1]);
                obj_sum += obj;
                n_upd += 1;
                updates += 1;
            }
            s = s_next;
            cell = next_cell;
        }
        let n = n_upd.max(1) as f64;
        metrics.push(EpisodeMetrics {
            step,
            episode,
            ret,
            critic_loss: loss_sum / n,
            actor_objective: obj_sum / n,
            osi_entropy: pmomdp::entropy(&belief),
        });
        episode += 1;
    }
    Ok(TrainResult {
        algo,
        grid,
        policy,
        critics,
        metrics,
        updates,
    })
}
