use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ctgame::harness::{
    self, parse_estimators, CostShift, ExperimentSpec, SamplingScheme, Scale, SpecFile,
    COUNTERFACTUAL_DRAWS, DEFAULT_RN_GRID,
};
use ctgame::state_model::Theta;
use ctgame::{Error, Result};

#[derive(Parser)]
#[command(
    name = "ctgame",
    version,
    about = "Continuous-time dynamic entry/exit games: solve, simulate, estimate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment spec (JSON, see schemas/experiment_spec.schema.json).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset 1-6; overrides the file's `experiment`.
    #[arg(long)]
    experiment: Option<u8>,
    #[arg(long)]
    scale: Option<Scale>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    sampling: Option<SamplingScheme>,
    /// Comma-separated, e.g. "2S-True,2S-Logit,CTNPL".
    #[arg(long)]
    estimators: Option<String>,
    #[arg(long)]
    markets: Option<usize>,
    #[arg(long)]
    replications: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Compute the equilibrium at the true parameters.
    Solve(Common),
    /// Simulate one dataset from the equilibrium.
    Simulate(Common),
    /// Estimate θ on one dataset with each listed estimator.
    Estimate {
        #[command(flatten)]
        common: Common,
        /// Data written by `simulate`; simulated afresh when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Monte Carlo experiment.
    Mc(Common),
    /// Spectral-radius sweep over θ_RN and stability objects at θ.
    Diagnose {
        #[command(flatten)]
        common: Common,
        /// Comma-separated θ_RN values.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
    },
    /// Steady-state effect of a fixed-cost policy.
    Counterfactual {
        #[command(flatten)]
        common: Common,
        /// Change in fixed costs (−0.2 cuts them by 0.2). Default −0.2.
        #[arg(long, allow_hyphen_values = true, conflicts_with = "subsidy_share")]
        fc_shift: Option<f64>,
        /// Cut fixed costs by this share of the entry cost.
        #[arg(long)]
        subsidy_share: Option<f64>,
        #[arg(long, default_value_t = COUNTERFACTUAL_DRAWS)]
        draws: usize,
        /// θ as JSON (e.g. an estimate); the spec's θ when omitted.
        #[arg(long)]
        theta: Option<PathBuf>,
    },
}

fn resolve(c: &Common) -> Result<ExperimentSpec> {
    let mut file = match &c.config {
        Some(p) => serde_json::from_str::<SpecFile>(&std::fs::read_to_string(p)?)?,
        None => SpecFile::default(),
    };
    if c.experiment.is_some() {
        file.experiment = c.experiment;
    }
    if file.experiment.is_none() && file.config.is_none() {
        file.experiment = Some(1);
    }
    if c.scale.is_some() {
        file.scale = c.scale;
    }
    if c.seed.is_some() {
        file.seed = c.seed;
    }
    if c.sampling.is_some() {
        file.sampling = c.sampling;
    }
    if let Some(list) = &c.estimators {
        file.estimators = Some(parse_estimators(list)?);
    }
    if c.markets.is_some() {
        file.markets = c.markets;
    }
    if c.replications.is_some() {
        file.replications = c.replications;
    }
    file.resolve()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Solve(c) => {
            let spec = resolve(&c)?;
            let art = harness::run_solve(&spec)?;
            art.write(&c.out)?;
            let sol = &art.prepared.solution;
            println!(
                "states {}  iterations {}  residual {:.3e}  damping {}",
                art.prepared.game.n_states(),
                sol.iterations,
                sol.residual,
                sol.damping
            );
            println!(
                "steady state: avg active {:.4}  firm activity {:?}",
                art.stats.avg_active,
                round4(&art.stats.firm_activity)
            );
            if let Some(j) = art.single_agent_jacobian {
                println!("single agent: max |dPsi/dsigma| = {j:.3e}");
            }
        }
        Command::Simulate(c) => {
            let spec = resolve(&c)?;
            let art = harness::run_simulate(&spec)?;
            art.write(&c.out)?;
            println!("wrote {}", c.out.join(art.data.file_name()).display());
        }
        Command::Estimate { common, data } => {
            let spec = resolve(&common)?;
            let prep = harness::prepare(&spec)?;
            let dataset = match data {
                Some(p) => harness::read_dataset(&spec, &prep.game, p)?,
                None => harness::simulate_dataset(&spec, &prep, spec.seed)?,
            };
            let recs = harness::estimate_all(&spec, &prep, &dataset, spec.seed)?;
            harness::write_estimates(&common.out, &spec, &recs)?;
            let names = Theta::parameter_names(spec.config.n_players);
            println!("{:<12} {}", "estimator", names.join(" "));
            for r in &recs {
                match &r.theta {
                    Some(t) => println!(
                        "{:<12} {}",
                        r.estimator.to_string(),
                        round4(t)
                            .iter()
                            .map(|v| v.to_string())
                            .collect::<Vec<_>>()
                            .join(" ")
                    ),
                    None => println!(
                        "{:<12} failed: {}",
                        r.estimator.to_string(),
                        r.error.as_deref().unwrap_or("")
                    ),
                }
            }
        }
        Command::Mc(c) => {
            let spec = resolve(&c)?;
            let res = harness::run_mc(&spec)?;
            res.write(&c.out)?;
            print!("{}", res.means_markdown());
            if let Some(r) = res.rmse_markdown() {
                println!();
                print!("{r}");
            }
        }
        Command::Diagnose { common, grid } => {
            let spec = resolve(&common)?;
            let grid = grid.unwrap_or_else(|| DEFAULT_RN_GRID.to_vec());
            let rep = harness::run_diagnose(&spec, &grid)?;
            rep.write(&common.out)?;
            for r in &rep.sweep {
                match (r.rho_psi_sigma, r.avg_active) {
                    (Some(rho), Some(a)) => println!(
                        "theta_rn {:<5} rho {:.4}  avg active {:.4}",
                        r.theta_rn, rho, a
                    ),
                    _ => println!(
                        "theta_rn {:<5} failed: {}",
                        r.theta_rn,
                        r.error.as_deref().unwrap_or("")
                    ),
                }
            }
            if let Some(s) = &rep.stability {
                println!(
                    "rho(M Psi_sigma) {:.4}  idempotency {:.1e}  annihilation {:.1e}",
                    s.rho_m_psi_theta_psi_sigma, s.idempotency_error, s.annihilation_error
                );
            }
        }
        Command::Counterfactual {
            common,
            fc_shift,
            subsidy_share,
            draws,
            theta,
        } => {
            let spec = resolve(&common)?;
            let theta = match theta {
                Some(p) => serde_json::from_str::<Theta>(&std::fs::read_to_string(p)?)?,
                None => spec.theta_true.clone(),
            };
            let shift = match subsidy_share {
                Some(s) => CostShift::SubsidyShare(s),
                None => CostShift::FixedCost(fc_shift.unwrap_or(-0.2)),
            };
            let rep = harness::run_counterfactual(&spec, &theta, shift, draws, spec.seed)?;
            rep.write(&common.out)?;
            print!("{}", rep.markdown());
        }
    }
    Ok(())
}

fn round4(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1e4).round() / 1e4).collect()
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::InvalidArgument(_) => "invalid_argument",
        Error::Domain(_) => "domain",
        Error::Numeric(_) => "numeric",
        Error::NotIrreducible { .. } => "not_irreducible",
        Error::NonConvergence { .. } => "non_convergence",
        Error::Optimizer { .. } => "optimizer",
        Error::Stage { .. } => "stage",
        Error::Io(_) => "io",
        Error::Csv(_) => "csv",
        Error::Json(_) => "json",
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let diag = serde_json::json!({ "error": kind(&e), "message": e.to_string() });
            eprintln!("{diag}");
            if e.is_invalid_input() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
