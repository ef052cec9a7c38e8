use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mdrl::envs::EnvSpec;
use mdrl::harness::{self, DpAlgo, Environment, ExperimentConfig, HarnessError, Method, PolicyTable};
use mdrl::pmomdp::MultiDomainMDP;
use mdrl::rl_loop::{self, Algo};
use mdrl::seeding::{self, streams};
use mdrl::unscented;

#[derive(Parser, Debug)]
#[command(name = "mdrl", version, about = "Multi-domain RL as a multi-objective MDP")]
struct Cli {
    /// Run seed; defaults to 0 (or the config's seed list for eval-ccs).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, or output file for single-table commands.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Exact solve; writes q.csv, policy.csv, grid.csv and convergence.csv.
    Solve {
        #[arg(long)]
        algo: String,
        /// Serialized MDP; defaults to the configured environment.
        #[arg(long)]
        mdp: Option<PathBuf>,
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Sample-based training; writes metrics.csv, policy.csv and grid.csv.
    Train {
        #[arg(long)]
        algo: String,
    },
    /// CCS-score evaluation of every configured algorithm and seed.
    EvalCcs,
    /// Returns with a fixed, filtered and ensemble-predicted belief.
    EvalOsi {
        #[arg(long)]
        algo: String,
    },
    /// Equal-weight sigma points matching uniform moments.
    SigmaPoints {
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        order: Option<usize>,
    },
    /// Enumerated deterministic policies with their coverage sets.
    Oracle {
        #[arg(long)]
        mdp: Option<PathBuf>,
        #[arg(long)]
        grid: Option<usize>,
    },
    /// Environment utilities.
    Env {
        #[command(subcommand)]
        action: EnvAction,
    },
    /// Writes the default configuration.
    Config,
}

#[derive(Subcommand, Debug)]
enum EnvAction {
    /// Writes the training MDP in the serialized text format.
    Export {
        /// two-domain-chain or continuous-slip-chain
        #[arg(long)]
        name: Option<String>,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, HarnessError> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn load_mdp(path: &Path) -> Result<MultiDomainMDP, HarnessError> {
    let text = fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(MultiDomainMDP::from_toml(&text)?)
}

fn write_text(out: Option<&Path>, text: &str) -> Result<(), HarnessError> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
                    path: dir.to_path_buf(),
                    source,
                })?;
            }
            fs::write(p, text).map_err(|source| HarnessError::Io {
                path: p.to_path_buf(),
                source,
            })
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let mut config = load_config(cli.config.as_deref())?;
    let seed = cli.seed.unwrap_or(0);
    let out_dir = cli.out.clone().unwrap_or_else(|| config.out_dir.clone());
    match cli.command {
        Command::Solve { algo, mdp, grid, alpha } => {
            let algo: DpAlgo = algo.parse()?;
            let mdp = match mdp {
                Some(p) => load_mdp(&p)?,
                None => Environment::from_config(&config, seed)?.train,
            };
            if let Some(a) = alpha {
                config.alpha = a;
            }
            let grid = harness::grid_for(grid.or(config.resolution), mdp.n_domains())?;
            let sol = harness::run_solver(algo, &mdp, &grid, &config.solver_options())?;
            harness::write_table(&harness::tensor_table(&sol.q_axes, sol.q.view()), &out_dir.join("q.csv"))?;
            harness::write_table(&harness::policy_table_csv(&sol.policy), &out_dir.join("policy.csv"))?;
            harness::write_table(&harness::grid_table(&sol.policy.grid), &out_dir.join("grid.csv"))?;
            harness::write_table(&harness::convergence_table(&sol.status), &out_dir.join("convergence.csv"))?;
            if sol.status.iter().any(|(_, s)| !s.converged) {
                log::warn!("{} did not converge", algo.name());
            }
        }
        Command::Train { algo } => {
            let algo: Algo = algo.parse()?;
            let seed = cli.seed.unwrap_or(config.train.seed);
            let env = Environment::from_config(&config, seed)?;
            let res = rl_loop::run_training(&env.train, &env.range, &config.train_config(algo, seed))?;
            harness::write_table(&harness::metrics_table(&res.metrics), &out_dir.join("metrics.csv"))?;
            let table = PolicyTable {
                grid: res.grid,
                table: res.policy,
            };
            harness::write_table(&harness::policy_table_csv(&table), &out_dir.join("policy.csv"))?;
            harness::write_table(&harness::grid_table(&table.grid), &out_dir.join("grid.csv"))?;
        }
        Command::EvalCcs => {
            if let Some(s) = cli.seed {
                config.seeds = vec![s];
            }
            let res = harness::run_experiment(&config, &out_dir)?;
            for f in &res.failures {
                eprintln!("failed: {} seed {}: {}", f.algo, f.seed, f.error);
            }
        }
        Command::EvalOsi { algo } => {
            let method: Method = algo.parse()?;
            let evals = harness::run_osi_study(&config, method, seed, &out_dir)?;
            for t in harness::tendency(&evals) {
                println!("{}: increase {} decrease {}", t.mode.name(), t.increase, t.decrease);
            }
        }
        Command::SigmaPoints { dim, order } => {
            if dim == 0 {
                return Err(HarnessError::Config("dim must be at least 1".into()));
            }
            let order = order.unwrap_or_else(|| unscented::default_moment_order(dim));
            let (set, ok) = unscented::solve_or_best(
                dim,
                order,
                &config.sigma.solver(),
                &mut seeding::stream(seed, streams::SIGMA_TRAIN),
            );
            if !ok {
                eprintln!("warning: moment residual {:.3e} above tolerance", set.residual);
            }
            write_text(cli.out.as_deref(), &harness::sigma_table(&set).to_csv())?;
        }
        Command::Oracle { mdp, grid } => {
            let mdp = match mdp {
                Some(p) => load_mdp(&p)?,
                None => Environment::from_config(&config, seed)?.train,
            };
            let grid = harness::grid_for(grid.or(config.resolution), mdp.n_domains())?;
            let [policies, pcs, ccs] = harness::oracle_tables(&mdp, &grid)?;
            harness::write_table(&policies, &out_dir.join("policies.csv"))?;
            harness::write_table(&pcs, &out_dir.join("pcs.csv"))?;
            harness::write_table(&ccs, &out_dir.join("ccs.csv"))?;
        }
        Command::Env {
            action: EnvAction::Export { name },
        } => {
            let spec = match name.as_deref() {
                None => config.env.clone(),
                Some(n) if n == config.env.name() => config.env.clone(),
                Some("two-domain-chain") => EnvSpec::default(),
                Some("continuous-slip-chain") => EnvSpec::ContinuousSlipChain {
                    chain: Default::default(),
                    range: vec![(0.1, 0.9)],
                },
                Some(other) => return Err(HarnessError::Config(format!("unknown environment {other:?}"))),
            };
            let env = Environment::build(&spec, config.gamma, &config.sigma, seed)?;
            write_text(cli.out.as_deref(), &env.train.to_toml())?;
        }
        Command::Config => write_text(cli.out.as_deref(), &config.to_toml())?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
