//! Experiment configuration, CCS-score evaluation, OSI evaluation and the
//! CSV tables written by the command line.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array3, ArrayView2, ArrayViewD, Axis, Dimension};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dp_solvers::{self, DpError, SolveStatus, SolverOptions};
use crate::envs::{self, ChainParams, EnvError, EnvSpec};
use crate::osi::{self, EnsembleOSI, OsiError, OsiTrainConfig, Posterior};
use crate::pmomdp::{self, MultiDomainMDP, PmomdpError, Preference, PreferenceGrid};
use crate::report::{Field, Table};
use crate::rl_loop::{self, Algo, EpisodeMetrics, TrainConfig, TrainError};
use crate::seeding::{self, streams};
use crate::unscented::{self, SigmaPointSet, SolverConfig};
use crate::utility::{self, UtilityError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Osi(#[from] OsiError),
    #[error(transparent)]
    Model(#[from] PmomdpError),
    #[error(transparent)]
    Utility(#[from] UtilityError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_table(table: &Table, path: &Path) -> Result<()> {
    table.write(path).map_err(io_err(path))
}

/// Exact dynamic-programming solvers available to experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DpAlgo {
    Dr,
    Cmdrl,
    Emdrl,
    Umdrl1,
    Umdrl2,
}

impl DpAlgo {
    pub const ALL: [DpAlgo; 5] = [DpAlgo::Dr, DpAlgo::Cmdrl, DpAlgo::Emdrl, DpAlgo::Umdrl1, DpAlgo::Umdrl2];

    pub fn name(self) -> &'static str {
        match self {
            DpAlgo::Dr => "dr",
            DpAlgo::Cmdrl => "cmdrl",
            DpAlgo::Emdrl => "emdrl",
            DpAlgo::Umdrl1 => "umdrl1",
            DpAlgo::Umdrl2 => "umdrl2",
        }
    }
}

impl FromStr for DpAlgo {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self> {
        DpAlgo::ALL
            .iter()
            .copied()
            .find(|a| a.name() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown solver {s:?}")))
    }
}

/// Either an exact solver or a sample-based training variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Dp(DpAlgo),
    Rl(Algo),
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Dp(a) => a.name(),
            Method::Rl(a) => a.name(),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self> {
        if let Ok(a) = s.parse::<DpAlgo>() {
            return Ok(Method::Dp(a));
        }
        s.parse::<Algo>()
            .map(Method::Rl)
            .map_err(|_| HarnessError::Config(format!("unknown algorithm {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SigmaSettings {
    /// Moment order of the training set; `None` uses `max(10, d)`.
    pub train_order: Option<usize>,
    pub eval_order: Option<usize>,
    pub learning_rate: f64,
    pub max_iter: usize,
    pub tolerance: f64,
}

impl Default for SigmaSettings {
    fn default() -> Self {
        let s = SolverConfig::default();
        SigmaSettings {
            train_order: None,
            eval_order: None,
            learning_rate: s.learning_rate,
            max_iter: s.max_iter,
            tolerance: s.tolerance,
        }
    }
}

impl SigmaSettings {
    pub fn solver(&self) -> SolverConfig {
        SolverConfig {
            learning_rate: self.learning_rate,
            max_iter: self.max_iter,
            tolerance: self.tolerance,
        }
    }
}

/// Experiment description read from a TOML file. `alpha` and `resolution`
/// override the corresponding fields of `solver` and `train`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    pub algos: Vec<String>,
    pub seeds: Vec<u64>,
    pub resolution: Option<usize>,
    pub alpha: f64,
    /// Overrides the environment's discount when set.
    pub gamma: Option<f64>,
    pub trials: usize,
    /// Episodes per domain and mode in OSI evaluation.
    pub osi_episodes: usize,
    /// Evaluation preferences; `None` uses the environment's default list.
    pub preferences: Option<Vec<Preference>>,
    pub out_dir: PathBuf,
    pub sigma: SigmaSettings,
    pub solver: SolverOptions,
    pub train: TrainConfig,
    pub osi: OsiTrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            env: EnvSpec::default(),
            algos: ["dr", "cmdrl", "emdrl", "umdrl1", "umdrl2", "drsac", "cmdsac"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            seeds: (0..8).collect(),
            resolution: None,
            alpha: 0.05,
            gamma: None,
            trials: 32,
            osi_episodes: 32,
            preferences: None,
            out_dir: PathBuf::from("results"),
            sigma: SigmaSettings::default(),
            solver: SolverOptions::default(),
            train: TrainConfig::default(),
            osi: OsiTrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let distinct: BTreeSet<u64> = self.seeds.iter().copied().collect();
        if distinct.len() != self.seeds.len() {
            return Err(HarnessError::Config(format!("repeated seed in {:?}", self.seeds)));
        }
        if self.trials == 0 {
            return Err(HarnessError::Config("trials must be at least 1".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(HarnessError::Config(format!("alpha {}", self.alpha)));
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g < 1.0) {
                return Err(HarnessError::Config(format!("gamma {g}")));
            }
        }
        self.methods()?;
        self.train_config(Algo::Cmdsac, 0).validate()?;
        Ok(())
    }

    pub fn methods(&self) -> Result<Vec<Method>> {
        self.algos.iter().map(|s| s.parse()).collect()
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            alpha: self.alpha,
            ..self.solver.clone()
        }
    }

    pub fn train_config(&self, algo: Algo, seed: u64) -> TrainConfig {
        TrainConfig {
            algo,
            seed,
            alpha: self.alpha,
            resolution: self.resolution.or(self.train.resolution),
            ..self.train.clone()
        }
    }
}

/// Built environment: training domains, the full box, and for sigma-point
/// environments the held-out evaluation set.
#[derive(Clone, Debug)]
pub struct Environment {
    pub spec: EnvSpec,
    pub chain: ChainParams,
    pub train: MultiDomainMDP,
    pub range: Vec<(f64, f64)>,
    pub train_points: Option<SigmaPointSet>,
    pub eval_points: Option<SigmaPointSet>,
}

impl Environment {
    /// Sigma points for the training and evaluation sets come from distinct
    /// streams of `seed`.
    pub fn build(spec: &EnvSpec, gamma: Option<f64>, sigma: &SigmaSettings, seed: u64) -> Result<Self> {
        let mut chain = spec.chain().clone();
        if let Some(g) = gamma {
            chain.gamma = g;
        }
        let range = spec.range();
        match spec {
            EnvSpec::TwoDomainChain { slip_a, slip_b, .. } => Ok(Environment {
                spec: spec.clone(),
                train: envs::build_two_domain_chain(&chain, *slip_a, *slip_b)?,
                chain,
                range,
                train_points: None,
                eval_points: None,
            }),
            EnvSpec::ContinuousSlipChain { .. } => {
                let d = range.len();
                let solver = sigma.solver();
                let order = |o: Option<usize>| o.unwrap_or_else(|| unscented::default_moment_order(d));
                let (tp, ok) = unscented::solve_or_best(
                    d,
                    order(sigma.train_order),
                    &solver,
                    &mut seeding::stream(seed, streams::SIGMA_TRAIN),
                );
                if !ok {
                    log::warn!("training sigma points: residual {:.3e} above tolerance", tp.residual);
                }
                let (ep, ok) = unscented::solve_or_best(
                    d,
                    order(sigma.eval_order),
                    &solver,
                    &mut seeding::stream(seed, streams::SIGMA_EVAL),
                );
                if !ok {
                    log::warn!("evaluation sigma points: residual {:.3e} above tolerance", ep.residual);
                }
                Ok(Environment {
                    spec: spec.clone(),
                    train: envs::build_continuous_slip_chain(&chain, &range, &tp)?,
                    chain,
                    range,
                    train_points: Some(tp),
                    eval_points: Some(ep),
                })
            }
        }
    }

    pub fn from_config(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        Self::build(&config.env, config.gamma, &config.sigma, seed)
    }

    /// Eleven evaluation preferences. Two domains: `[k/10, 1 - k/10]`. Boxes:
    /// the full box, then ten boxes of a fifth of the width along the first
    /// coordinate sweeping from its low end to its high end.
    pub fn default_preferences(&self) -> Vec<Preference> {
        match self.spec {
            EnvSpec::TwoDomainChain { .. } => (0..=10)
                .map(|k| {
                    let t = k as f64 / 10.0;
                    Preference::Discrete { weights: vec![t, 1.0 - t] }
                })
                .collect(),
            EnvSpec::ContinuousSlipChain { .. } => {
                let full = Preference::full_box(&self.range);
                let (mu0, sd0) = match &full {
                    Preference::UniformBox { mu, sigma } => (mu.clone(), sigma.clone()),
                    _ => unreachable!(),
                };
                let (lo, hi) = self.range[0];
                let w = hi - lo;
                let mut out = vec![full];
                for k in 0..10 {
                    let mut mu = mu0.clone();
                    let mut sigma = sd0.clone();
                    mu[0] = lo + w * (0.1 + 0.8 * k as f64 / 9.0);
                    sigma[0] = 0.2 * w / 12f64.sqrt();
                    out.push(Preference::UniformBox { mu, sigma });
                }
                out
            }
        }
    }

    /// Weights over the training domains that condition the policy.
    pub fn policy_weights(&self, pref: &Preference) -> Result<Vec<f64>> {
        match self.spec {
            EnvSpec::TwoDomainChain { .. } => Ok(pref.weights(self.train.n_domains())?),
            EnvSpec::ContinuousSlipChain { .. } => Ok(rl_loop::box_domain_weights(&self.train, pref)?),
        }
    }

    /// Domains a preference is scored on, with their weights.
    pub fn eval_domains(&self, pref: &Preference) -> Result<(MultiDomainMDP, Vec<f64>)> {
        match (&self.spec, &self.eval_points) {
            (EnvSpec::ContinuousSlipChain { .. }, Some(points)) => {
                let mdp = envs::build_slip_chain_for_box(&self.chain, pref, points)?;
                let n = mdp.n_domains();
                Ok((mdp, vec![1.0 / n as f64; n]))
            }
            _ => Ok((self.train.clone(), pref.weights(self.train.n_domains())?)),
        }
    }

    /// Full-uncertainty weights over the training domains.
    pub fn full_weights(&self) -> Result<Vec<f64>> {
        self.policy_weights(&Preference::full_box(&self.range)).or_else(|_| {
            let n = self.train.n_domains();
            Ok(vec![1.0 / n as f64; n])
        })
    }

    /// Domains OSI evaluation runs in: the held-out set over the full box, or
    /// the training domains.
    pub fn osi_domains(&self) -> Result<MultiDomainMDP> {
        match self.spec {
            EnvSpec::ContinuousSlipChain { .. } => Ok(self.eval_domains(&Preference::full_box(&self.range))?.0),
            EnvSpec::TwoDomainChain { .. } => Ok(self.train.clone()),
        }
    }
}

/// A policy table per preference cell.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyTable {
    pub grid: PreferenceGrid,
    /// `[cell, state, action]`
    pub table: Array3<f64>,
}

impl PolicyTable {
    pub fn single(policy: ArrayView2<f64>, n_domains: usize) -> Result<Self> {
        Ok(PolicyTable {
            grid: PreferenceGrid::from_cells(vec![vec![1.0 / n_domains as f64; n_domains]])?,
            table: policy.to_owned().insert_axis(Axis(0)),
        })
    }

    /// Table of the grid cell nearest to `w`.
    pub fn for_weights(&self, w: &[f64]) -> ArrayView2<'_, f64> {
        self.table.index_axis(Axis(0), self.grid.nearest(w))
    }
}

/// Steps after which a discounted tail is below `1e-12` of the per-step bound.
pub fn horizon(gamma: f64) -> usize {
    ((1e-12f64).ln() / gamma.ln()).ceil().max(1.0) as usize
}

/// Discounted return of one episode of `horizon` steps.
pub fn rollout_return<R: Rng + ?Sized>(
    mdp: &MultiDomainMDP,
    domain: usize,
    policy: ArrayView2<f64>,
    horizon: usize,
    rng: &mut R,
) -> Result<f64> {
    let mut s = pmomdp::sample_initial(mdp, rng);
    let (mut ret, mut disc) = (0.0, 1.0);
    for _ in 0..horizon {
        let a = pmomdp::sample_categorical(policy.row(s).iter().copied(), rng);
        let (s_next, r) = pmomdp::sample_transition(mdp, domain, s, a, rng)?;
        ret += disc * r;
        disc *= mdp.gamma;
        s = s_next;
    }
    Ok(ret)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreStats {
    pub mean: f64,
    pub stderr: f64,
    pub iqm: f64,
    pub iqr: f64,
    pub samples: Vec<f64>,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

/// Interquartile mean (mean after dropping `floor(n/4)` samples at each end)
/// and interquartile range.
pub fn interquartile(samples: &[f64]) -> (f64, f64) {
    if samples.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let cut = v.len() / 4;
    let mid = &v[cut..v.len() - cut];
    let iqm = mid.iter().sum::<f64>() / mid.len() as f64;
    (iqm, quantile(&v, 0.75) - quantile(&v, 0.25))
}

pub fn summarize(samples: Vec<f64>) -> ScoreStats {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = if samples.len() > 1 {
        samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let (iqm, iqr) = interquartile(&samples);
    ScoreStats {
        mean,
        stderr: (var / n).sqrt(),
        iqm,
        iqr,
        samples,
    }
}

/// Preference-weighted Monte-Carlo return of `policy` over the domains of
/// `mdp`. Each trial runs one episode in every domain with positive weight
/// and records the weighted sum.
pub fn ccs_score<R: Rng + ?Sized>(
    policy: ArrayView2<f64>,
    mdp: &MultiDomainMDP,
    weights: &[f64],
    trials: usize,
    rng: &mut R,
) -> Result<ScoreStats> {
    if trials == 0 {
        return Err(HarnessError::Config("trials must be at least 1".into()));
    }
    if weights.len() != mdp.n_domains() {
        return Err(HarnessError::Dp(DpError::Domains {
            got: weights.len(),
            expected: mdp.n_domains(),
        }));
    }
    let h = horizon(mdp.gamma);
    let mut samples = Vec::with_capacity(trials);
    for _ in 0..trials {
        let mut total = 0.0;
        for (d, &w) in weights.iter().enumerate() {
            if w > 0.0 {
                total += w * rollout_return(mdp, d, policy, h, rng)?;
            }
        }
        samples.push(total);
    }
    Ok(summarize(samples))
}

/// Output of an exact solve in table form.
#[derive(Clone, Debug)]
pub struct SolveOutput {
    pub policy: PolicyTable,
    /// Axis names of `q`.
    pub q_axes: Vec<&'static str>,
    pub q: ndarray::ArrayD<f64>,
    /// `(phase, status)` per solve.
    pub status: Vec<(String, SolveStatus)>,
}

pub fn run_solver(algo: DpAlgo, mdp: &MultiDomainMDP, grid: &PreferenceGrid, opts: &SolverOptions) -> Result<SolveOutput> {
    let nd = mdp.n_domains();
    Ok(match algo {
        DpAlgo::Dr => {
            let sol = dp_solvers::solve_dr(mdp, &vec![1.0 / nd as f64; nd], opts)?;
            SolveOutput {
                policy: PolicyTable::single(sol.policy.view(), nd)?,
                q_axes: vec!["domain", "state", "action"],
                q: sol.q.into_dyn(),
                status: vec![("dr".into(), sol.status)],
            }
        }
        DpAlgo::Cmdrl | DpAlgo::Emdrl => {
            let sol = if algo == DpAlgo::Cmdrl {
                dp_solvers::solve_cmdrl(mdp, grid, opts)?
            } else {
                dp_solvers::solve_emdrl(mdp, grid, opts)?
            };
            let status = sol
                .status
                .iter()
                .enumerate()
                .map(|(c, s)| (format!("cell{c}"), s.clone()))
                .collect();
            SolveOutput {
                policy: PolicyTable {
                    grid: grid.clone(),
                    table: sol.deployed.table,
                },
                q_axes: vec!["cell", "domain", "state", "action"],
                q: sol.q.table.into_dyn(),
                status,
            }
        }
        DpAlgo::Umdrl1 | DpAlgo::Umdrl2 => {
            let sol = if algo == DpAlgo::Umdrl1 {
                dp_solvers::solve_umdrl_v1(mdp, grid, opts)?
            } else {
                dp_solvers::solve_umdrl_v2(mdp, grid, opts)?
            };
            SolveOutput {
                policy: PolicyTable {
                    grid: grid.clone(),
                    table: sol.policy.table,
                },
                q_axes: vec!["domain", "state", "action"],
                q: sol.q.into_dyn(),
                status: vec![(algo.name().into(), sol.status)],
            }
        }
    })
}

pub fn grid_for(config_resolution: Option<usize>, n_domains: usize) -> Result<PreferenceGrid> {
    let r = config_resolution.unwrap_or_else(|| PreferenceGrid::default_resolution(n_domains));
    Ok(PreferenceGrid::simplex(n_domains, r)?)
}

/// Policy of one (method, seed) cell, plus training metrics for sampled
/// methods.
pub fn produce_policy(
    method: Method,
    env: &Environment,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<(PolicyTable, Option<Vec<EpisodeMetrics>>)> {
    match method {
        Method::Dp(a) => {
            let grid = grid_for(config.resolution, env.train.n_domains())?;
            Ok((run_solver(a, &env.train, &grid, &config.solver_options())?.policy, None))
        }
        Method::Rl(a) => {
            let res = rl_loop::run_training(&env.train, &env.range, &config.train_config(a, seed))?;
            Ok((
                PolicyTable {
                    grid: res.grid,
                    table: res.policy,
                },
                Some(res.metrics),
            ))
        }
    }
}

pub fn preference_label(p: &Preference) -> String {
    let list = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ");
    match p {
        Preference::Discrete { weights } => format!("w=[{}]", list(weights)),
        Preference::Delta { index, n } => format!("delta={index}/{n}"),
        Preference::UniformBox { mu, sigma } => format!("mu=[{}] sigma=[{}]", list(mu), list(sigma)),
    }
}

pub fn metrics_table(metrics: &[EpisodeMetrics]) -> Table {
    let mut t = Table::new(&["step", "episode", "return", "critic_loss", "actor_objective", "osi_entropy"]);
    for m in metrics {
        t.push(vec![
            m.step.into(),
            m.episode.into(),
            m.ret.into(),
            m.critic_loss.into(),
            m.actor_objective.into(),
            m.osi_entropy.into(),
        ]);
    }
    t
}

/// One row per element: the index along every axis, then the value.
pub fn tensor_table(axes: &[&str], data: ArrayViewD<f64>) -> Table {
    assert_eq!(axes.len(), data.ndim());
    let mut header: Vec<&str> = axes.to_vec();
    header.push("value");
    let mut t = Table::new(&header);
    for (idx, v) in data.indexed_iter() {
        let mut row: Vec<Field> = idx.slice().iter().map(|&i| Field::from(i)).collect();
        row.push((*v).into());
        t.push(row);
    }
    t
}

pub fn policy_table_csv(p: &PolicyTable) -> Table {
    let mut t = Table::new(&["cell", "state", "action", "prob"]);
    for ((c, s, a), v) in p.table.indexed_iter() {
        t.push(vec![c.into(), s.into(), a.into(), (*v).into()]);
    }
    t
}

pub fn grid_table(grid: &PreferenceGrid) -> Table {
    let nd = grid.n_domains();
    let mut header = vec!["cell".to_string()];
    header.extend((0..nd).map(|i| format!("w{i}")));
    let mut t = Table::new(&header);
    for (c, w) in grid.cells.iter().enumerate() {
        let mut row = vec![Field::from(c)];
        row.extend(w.iter().map(|&x| Field::from(x)));
        t.push(row);
    }
    t
}

pub fn convergence_table(status: &[(String, SolveStatus)]) -> Table {
    let mut t = Table::new(&["phase", "iteration", "residual", "converged"]);
    for (phase, s) in status {
        for (i, r) in s.history.iter().enumerate() {
            t.push(vec![phase.as_str().into(), (i + 1).into(), (*r).into(), s.converged.into()]);
        }
    }
    t
}

pub fn sigma_table(set: &SigmaPointSet) -> Table {
    let mut header = vec!["point".to_string()];
    header.extend((0..set.dim()).map(|c| format!("x{c}")));
    header.push("weight".into());
    let mut t = Table::new(&header);
    for (i, row) in set.points.outer_iter().enumerate() {
        let mut r = vec![Field::from(i)];
        r.extend(row.iter().map(|&x| Field::from(x)));
        r.push(set.weights[i].into());
        t.push(r);
    }
    t
}

/// Deterministic policies of `mdp` with their values, and the Pareto and
/// convex coverage sets on `grid`.
pub fn oracle_tables(mdp: &MultiDomainMDP, grid: &PreferenceGrid) -> Result<[Table; 3]> {
    let nd = mdp.n_domains();
    let all = utility::enumerate_policies_oracle(mdp, utility::ORACLE_CAP)?;
    let values: Vec<_> = all.iter().map(|(_, v)| v.clone()).collect();
    let vcols = (0..nd).map(|i| format!("v{i}"));
    let mut header = vec!["policy".to_string(), "actions".to_string()];
    header.extend(vcols.clone());
    let mut policies = Table::new(&header);
    for (id, (acts, v)) in all.iter().enumerate() {
        let mut row = vec![
            Field::from(id),
            Field::from(acts.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(" ")),
        ];
        row.extend(v.0.iter().map(|&x| Field::from(x)));
        policies.push(row);
    }
    let mut header = vec!["policy".to_string()];
    header.extend(vcols.clone());
    let mut pcs_t = Table::new(&header);
    for e in utility::compute_pcs(&values)?.entries {
        let mut row = vec![Field::from(e.id)];
        row.extend(e.values.0.iter().map(|&x| Field::from(x)));
        pcs_t.push(row);
    }
    header.extend((0..nd).map(|i| format!("witness{i}")));
    let mut ccs_t = Table::new(&header);
    for e in utility::compute_ccs(&values, grid)?.entries {
        let mut row = vec![Field::from(e.id)];
        row.extend(e.values.0.iter().map(|&x| Field::from(x)));
        let w = e.witness.unwrap_or_else(|| vec![f64::NAN; nd]);
        row.extend(w.into_iter().map(Field::from));
        ccs_t.push(row);
    }
    Ok([policies, pcs_t, ccs_t])
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub algo: String,
    pub seed: u64,
    pub pref_id: usize,
    pub stats: ScoreStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Failure {
    pub algo: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentResults {
    pub scores: Vec<ScoreRow>,
    pub failures: Vec<Failure>,
    pub preferences: Vec<Preference>,
}

fn evaluate_cell(
    method: Method,
    env: &Environment,
    config: &ExperimentConfig,
    prefs: &[Preference],
    seed: u64,
) -> Result<(Vec<ScoreRow>, Option<Vec<EpisodeMetrics>>)> {
    let (policy, metrics) = produce_policy(method, env, config, seed)?;
    let mut rng = seeding::stream(seed, streams::EVALUATION);
    let mut rows = Vec::with_capacity(prefs.len());
    for (k, p) in prefs.iter().enumerate() {
        let w = env.policy_weights(p)?;
        let (mdp, ew) = env.eval_domains(p)?;
        let stats = ccs_score(policy.for_weights(&w), &mdp, &ew, config.trials, &mut rng)?;
        rows.push(ScoreRow {
            algo: method.name().into(),
            seed,
            pref_id: k,
            stats,
        });
    }
    Ok((rows, metrics))
}

/// Runs every (algorithm, seed) cell in a work pool and writes `scores.csv`,
/// `summary.csv`, `preferences.csv`, `failures.csv` and per-run training
/// metrics under `out`. Sigma points are solved once with the first seed.
pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> Result<ExperimentResults> {
    config.validate()?;
    let methods = config.methods()?;
    let env = Environment::from_config(config, config.seeds.first().copied().unwrap_or(0))?;
    let prefs = config.preferences.clone().unwrap_or_else(|| env.default_preferences());
    let cells: Vec<(Method, u64)> = methods
        .iter()
        .flat_map(|&m| config.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let outcomes: Vec<_> = cells
        .par_iter()
        .map(|&(m, seed)| evaluate_cell(m, &env, config, &prefs, seed))
        .collect();

    let mut results = ExperimentResults {
        preferences: prefs.clone(),
        ..Default::default()
    };
    fs::create_dir_all(out).map_err(io_err(out))?;
    for (&(m, seed), outcome) in cells.iter().zip(outcomes) {
        match outcome {
            Ok((rows, metrics)) => {
                if let Some(metrics) = metrics {
                    write_table(&metrics_table(&metrics), &out.join(format!("metrics_{m}_seed{seed}.csv")))?;
                }
                results.scores.extend(rows);
            }
            Err(e) => {
                log::error!("{m} seed {seed}: {e}");
                results.failures.push(Failure {
                    algo: m.name().into(),
                    seed,
                    error: e.to_string(),
                });
            }
        }
    }

    let mut scores = Table::new(&["algo", "seed", "pref_id", "score", "iqr"]);
    for r in &results.scores {
        scores.push(vec![
            r.algo.as_str().into(),
            r.seed.into(),
            r.pref_id.into(),
            r.stats.iqm.into(),
            r.stats.iqr.into(),
        ]);
    }
    write_table(&scores, &out.join("scores.csv"))?;
    write_table(&summary_table(&results, &methods), &out.join("summary.csv"))?;

    let mut pt = Table::new(&["pref_id", "label"]);
    for (k, p) in prefs.iter().enumerate() {
        pt.push(vec![k.into(), preference_label(p).into()]);
    }
    write_table(&pt, &out.join("preferences.csv"))?;

    let mut ft = Table::new(&["algo", "seed", "error"]);
    for f in &results.failures {
        ft.push(vec![f.algo.as_str().into(), f.seed.into(), f.error.as_str().into()]);
    }
    write_table(&ft, &out.join("failures.csv"))?;
    Ok(results)
}

/// Rows are preferences; each method contributes an IQM and an IQR column
/// computed over the pooled trials-by-seeds sample.
pub fn summary_table(results: &ExperimentResults, methods: &[Method]) -> Table {
    let mut header = vec!["pref_id".to_string()];
    for m in methods {
        header.push(format!("{m}_iqm"));
        header.push(format!("{m}_iqr"));
    }
    let mut t = Table::new(&header);
    if methods.is_empty() {
        return t;
    }
    for k in 0..results.preferences.len() {
        let mut row = vec![Field::from(k)];
        for m in methods {
            let pooled: Vec<f64> = results
                .scores
                .iter()
                .filter(|r| r.algo == m.name() && r.pref_id == k)
                .flat_map(|r| r.stats.samples.iter().copied())
                .collect();
            let (iqm, iqr) = interquartile(&pooled);
            row.push(iqm.into());
            row.push(iqr.into());
        }
        t.push(row);
    }
    t
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OsiMode {
    FixedFull,
    ExactBayes,
    Ensemble,
}

impl OsiMode {
    pub const ALL: [OsiMode; 3] = [OsiMode::FixedFull, OsiMode::ExactBayes, OsiMode::Ensemble];

    pub fn name(self) -> &'static str {
        match self {
            OsiMode::FixedFull => "fixed-full",
            OsiMode::ExactBayes => "exact-bayes",
            OsiMode::Ensemble => "ensemble",
        }
    }
}

impl FromStr for OsiMode {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self> {
        OsiMode::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown osi mode {s:?}")))
    }
}

/// Weights over `mdp`'s domains from a Gaussian belief on kappa, with the
/// standard deviation floored at `floor`.
pub fn gaussian_domain_weights(mdp: &MultiDomainMDP, mu: &[f64], sigma: &[f64], floor: f64) -> Vec<f64> {
    let logs: Vec<f64> = mdp
        .domains
        .iter()
        .map(|d| {
            (0..mu.len())
                .map(|c| {
                    let s = sigma[c].max(floor);
                    let z = (d.kappa.get(c).copied().unwrap_or(mu[c]) - mu[c]) / s;
                    -0.5 * z * z - s.ln()
                })
                .sum()
        })
        .collect();
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct OsiEpisode {
    pub ret: f64,
    /// Conditioning weights over training domains after the last step.
    pub final_weights: Vec<f64>,
    pub final_belief: Posterior,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OsiEvaluation {
    pub mode: OsiMode,
    pub domain: usize,
    pub episodes: Vec<OsiEpisode>,
    /// Belief after every step of the first episode.
    pub trace: Vec<Posterior>,
}

impl OsiEvaluation {
    pub fn returns(&self) -> Vec<f64> {
        self.episodes.iter().map(|e| e.ret).collect()
    }
}

/// Runs `episodes` episodes of `steps` steps in domain `domain` of `world`,
/// conditioning `policy` on a belief over the training domains of `env`
/// that the chosen mode keeps fixed or updates after every transition.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_with_osi<R: Rng + ?Sized>(
    policy: &PolicyTable,
    env: &Environment,
    world: &MultiDomainMDP,
    domain: usize,
    mode: OsiMode,
    ensemble: Option<&EnsembleOSI>,
    episodes: usize,
    steps: usize,
    rng: &mut R,
) -> Result<OsiEvaluation> {
    if mode == OsiMode::Ensemble && ensemble.is_none() {
        return Err(HarnessError::Config("ensemble mode needs a trained ensemble".into()));
    }
    let full = env.full_weights()?;
    let mut out = OsiEvaluation {
        mode,
        domain,
        episodes: Vec::with_capacity(episodes),
        trace: Vec::new(),
    };
    for ep in 0..episodes {
        let mut belief = match mode {
            OsiMode::Ensemble => Posterior::full_box(&env.range),
            _ => Posterior::Discrete { weights: full.clone() },
        };
        let mut w = full.clone();
        let mut s = pmomdp::sample_initial(world, rng);
        let (mut ret, mut disc) = (0.0, 1.0);
        for _ in 0..steps {
            let pi = policy.for_weights(&w);
            let a = pmomdp::sample_categorical(pi.row(s).iter().copied(), rng);
            let (s_next, r) = pmomdp::sample_transition(world, domain, s, a, rng)?;
            ret += disc * r;
            disc *= world.gamma;
            match mode {
                OsiMode::FixedFull => {}
                OsiMode::ExactBayes => {
                    belief = osi::bayes_filter_step(&belief, &env.train, s, a, s_next)?.posterior;
                    w = belief.weights().expect("discrete belief").to_vec();
                }
                OsiMode::Ensemble => {
                    let net = ensemble.expect("checked above");
                    belief = osi::ensemble_predict(net, s, a, s_next, &belief)?.posterior;
                    if let Posterior::MeanStd { mu, sigma } = &belief {
                        w = gaussian_domain_weights(&env.train, mu, sigma, net.sigma_floor());
                    }
                }
            }
            if ep == 0 {
                out.trace.push(belief.clone());
            }
            s = s_next;
        }
        out.episodes.push(OsiEpisode {
            ret,
            final_weights: w,
            final_belief: belief,
        });
    }
    Ok(out)
}

pub fn trace_table(trace: &[Posterior]) -> Table {
    let Some(first) = trace.first() else {
        return Table::new(&["step"]);
    };
    let mut header = vec!["step".to_string()];
    match first {
        Posterior::Discrete { weights } => header.extend((0..weights.len()).map(|i| format!("w{i}"))),
        Posterior::MeanStd { mu, .. } => {
            for c in 0..mu.len() {
                header.push(format!("mu{c}"));
                header.push(format!("sigma{c}"));
            }
        }
    }
    let mut t = Table::new(&header);
    for (k, b) in trace.iter().enumerate() {
        let mut row = vec![Field::from(k + 1)];
        match b {
            Posterior::Discrete { weights } => row.extend(weights.iter().map(|&x| Field::from(x))),
            Posterior::MeanStd { mu, sigma } => {
                for (m, s) in mu.iter().zip(sigma) {
                    row.push((*m).into());
                    row.push((*s).into());
                }
            }
        }
        t.push(row);
    }
    t
}

/// Per-domain comparison of each belief-updating mode against the fixed
/// full-uncertainty input.
#[derive(Clone, Debug, PartialEq)]
pub struct Tendency {
    pub mode: OsiMode,
    pub increase: usize,
    pub decrease: usize,
    pub unchanged: usize,
}

pub fn tendency(evals: &[OsiEvaluation]) -> Vec<Tendency> {
    let mean = |e: &OsiEvaluation| e.returns().iter().sum::<f64>() / e.episodes.len().max(1) as f64;
    let mut out = Vec::new();
    for mode in [OsiMode::ExactBayes, OsiMode::Ensemble] {
        let mut t = Tendency {
            mode,
            increase: 0,
            decrease: 0,
            unchanged: 0,
        };
        let mut any = false;
        for e in evals.iter().filter(|e| e.mode == mode) {
            let Some(base) = evals.iter().find(|b| b.mode == OsiMode::FixedFull && b.domain == e.domain) else {
                continue;
            };
            any = true;
            let diff = mean(e) - mean(base);
            if diff > 1e-12 {
                t.increase += 1;
            } else if diff < -1e-12 {
                t.decrease += 1;
            } else {
                t.unchanged += 1;
            }
        }
        if any {
            out.push(t);
        }
    }
    out
}

/// OSI study for one method and seed: every mode in every evaluation domain,
/// writing `osi_returns.csv`, `tendency.csv` and one belief trace per mode
/// and domain under `out`.
pub fn run_osi_study(config: &ExperimentConfig, method: Method, seed: u64, out: &Path) -> Result<Vec<OsiEvaluation>> {
    config.validate()?;
    let env = Environment::from_config(config, seed)?;
    let (policy, _) = produce_policy(method, &env, config, seed)?;
    let (net, _, _) = osi::train_ensemble(
        &env.train,
        &env.range,
        &config.osi,
        &mut seeding::stream(seed, streams::OSI_INIT),
    )?;
    let world = env.osi_domains()?;
    let steps = horizon(world.gamma);
    let mut evals = Vec::new();
    for d in 0..world.n_domains() {
        for mode in OsiMode::ALL {
            // common random numbers across modes
            let mut rng = seeding::stream(seed.wrapping_add(d as u64), streams::EVALUATION);
            evals.push(evaluate_with_osi(
                &policy,
                &env,
                &world,
                d,
                mode,
                Some(&net),
                config.osi_episodes,
                steps,
                &mut rng,
            )?);
        }
    }
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut rt = Table::new(&["mode", "domain", "kappa0", "mean_return", "stderr", "iqm", "iqr", "final_entropy"]);
    for e in &evals {
        let stats = summarize(e.returns());
        let ent = e.episodes.iter().map(|x| x.final_belief.entropy()).sum::<f64>() / e.episodes.len().max(1) as f64;
        rt.push(vec![
            e.mode.name().into(),
            e.domain.into(),
            world.domains[e.domain].kappa.first().copied().unwrap_or(f64::NAN).into(),
            stats.mean.into(),
            stats.stderr.into(),
            stats.iqm.into(),
            stats.iqr.into(),
            ent.into(),
        ]);
        write_table(
            &trace_table(&e.trace),
            &out.join(format!("belief_{}_domain{}.csv", e.mode.name(), e.domain)),
        )?;
    }
    write_table(&rt, &out.join("osi_returns.csv"))?;
    let mut tt = Table::new(&["mode", "increase", "decrease", "unchanged"]);
    for t in tendency(&evals) {
        tt.push(vec![t.mode.name().into(), t.increase.into(), t.decrease.into(), t.unchanged.into()]);
    }
    write_table(&tt, &out.join("tendency.csv"))?;
    Ok(evals)
}
