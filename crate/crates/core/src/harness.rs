//! Experiment specifications and the pipelines behind the command-line
//! front end: solve, simulate, estimate, Monte Carlo, diagnostics and
//! counterfactuals.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::prelude::Distribution;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{
    jacobian_psi, stability_report, stability_sweep, StabilityReport, SweepRow, Wrt, FD_STEP,
};
use crate::equilibrium::{solve_mpe, CcpVector, MpeSolution, SolveOptions};
use crate::error::{invalid, Error, Result};
use crate::estimate::{ctnpl, init_ccp, rmse_relative, InitMethod, NplOptions, Sample};
use crate::kernels::transition_matrix;
use crate::simulate::{
    market_rng, sample_discrete, simulate_continuous, stationary_stats, steady_state,
    ContinuousSampling, DescriptiveStats, DiscreteSampling, EventLog, InitialStates, Panel,
};
use crate::state_model::{
    am07_market_transition, calibrate_nature_rates, EntryExitGame, GameConfig, Theta,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// Three firms, three demand levels.
    Desk,
    #[default]
    Paper,
}

impl FromStr for Scale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "desk" => Ok(Scale::Desk),
            "paper" => Ok(Scale::Paper),
            other => invalid(format!("unknown scale '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingScheme {
    #[default]
    Continuous,
    Discrete,
}

impl FromStr for SamplingScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "continuous" => Ok(SamplingScheme::Continuous),
            "discrete" => Ok(SamplingScheme::Discrete),
            other => invalid(format!("unknown sampling scheme '{other}'")),
        }
    }
}

/// Where nature's rates come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NatureSource {
    /// `q_up`, `q_down` as given in the config.
    #[default]
    Config,
    /// Least-squares fit to the five-level AM07 market-size transition matrix.
    Fit,
}

/// An estimator: two-step (one stage) or iterated, with its first-stage CCPs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Estimator {
    TwoStep(InitMethod),
    /// `None` uses the spec's `ctnpl_init`.
    Ctnpl(Option<InitMethod>),
}

fn init_label(m: InitMethod) -> &'static str {
    match m {
        InitMethod::True => "True",
        InitMethod::Frequency => "Freq",
        InitMethod::Logit => "Logit",
        InitMethod::Random => "Random",
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Estimator::TwoStep(m) => write!(f, "2S-{}", init_label(*m)),
            Estimator::Ctnpl(None) => write!(f, "CTNPL"),
            Estimator::Ctnpl(Some(m)) => write!(f, "CTNPL-{}", init_label(*m)),
        }
    }
}

impl FromStr for Estimator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        if lower == "ctnpl" {
            return Ok(Estimator::Ctnpl(None));
        }
        if let Some(rest) = lower.strip_prefix("ctnpl-") {
            return Ok(Estimator::Ctnpl(Some(rest.parse()?)));
        }
        if let Some(rest) = lower.strip_prefix("2s-") {
            return Ok(Estimator::TwoStep(rest.parse()?));
        }
        invalid(format!("unknown estimator '{s}'"))
    }
}

impl Serialize for Estimator {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Estimator {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Parses a comma-separated estimator list.
pub fn parse_estimators(list: &str) -> Result<Vec<Estimator>> {
    let out: Vec<Estimator> = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    if out.is_empty() {
        return invalid("estimator list is empty");
    }
    Ok(out)
}

pub const ALL_ESTIMATORS: [Estimator; 5] = [
    Estimator::TwoStep(InitMethod::True),
    Estimator::TwoStep(InitMethod::Frequency),
    Estimator::TwoStep(InitMethod::Logit),
    Estimator::TwoStep(InitMethod::Random),
    Estimator::Ctnpl(None),
];

/// A fully resolved experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    /// Preset number 1–6, `None` for custom specs.
    pub experiment: Option<u8>,
    pub config: GameConfig,
    pub theta_true: Theta,
    pub sampling: SamplingScheme,
    pub markets: usize,
    pub replications: usize,
    pub estimators: Vec<Estimator>,
    pub seed: u64,
    /// Continuous sampling: events recorded per market.
    pub events_per_market: usize,
    /// Discrete sampling: transitions per market.
    pub periods: usize,
    pub nature: NatureSource,
    pub ctnpl_init: InitMethod,
    pub max_stages: usize,
}

/// `(θ_EC, θ_RN)` of presets 1–6.
pub const PRESETS: [(f64, f64); 6] = [
    (1.0, 0.0),
    (1.0, 1.0),
    (1.0, 2.0),
    (0.0, 1.0),
    (2.0, 1.0),
    (4.0, 1.0),
];

impl ExperimentSpec {
    pub fn preset(experiment: u8, scale: Scale) -> Result<Self> {
        if !(1..=6).contains(&experiment) {
            return invalid(format!("experiment presets are 1 to 6, got {experiment}"));
        }
        let (ec, rn) = PRESETS[experiment as usize - 1];
        let (n, levels, markets, reps) = match scale {
            Scale::Paper => (5, 5, 400, 100),
            Scale::Desk => (3, 3, 200, 25),
        };
        let fc = [-1.9, -1.8, -1.7, -1.6, -1.5][..n].to_vec();
        Ok(Self {
            experiment: Some(experiment),
            config: GameConfig {
                n_players: n,
                n_choices: 2,
                market_levels: levels,
                lambda: 1.0,
                rho: 0.05,
                q_up: 0.2,
                q_down: 0.2,
                delta: 1.0,
            },
            theta_true: Theta {
                fc,
                rs: 1.0,
                rn,
                ec,
            },
            sampling: SamplingScheme::Continuous,
            markets,
            replications: reps,
            estimators: ALL_ESTIMATORS.to_vec(),
            seed: 1,
            events_per_market: 1,
            periods: 1,
            nature: NatureSource::Config,
            ctnpl_init: InitMethod::Logit,
            max_stages: 20,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.theta_true.validate(self.config.n_players)?;
        if self.markets == 0 {
            return invalid("markets must be positive");
        }
        if self.replications == 0 {
            return invalid("replications must be positive");
        }
        if self.estimators.is_empty() {
            return invalid("estimator list is empty");
        }
        if self.events_per_market == 0 || self.periods == 0 {
            return invalid("events_per_market and periods must be positive");
        }
        if self.max_stages == 0 || self.max_stages > crate::estimate::MAX_STAGES_CAP {
            return invalid("max_stages out of range");
        }
        if self.nature == NatureSource::Fit && self.config.market_levels != 5 {
            return invalid(
                "nature = \"fit\" targets the five-level AM07 matrix; market_levels must be 5",
            );
        }
        Ok(())
    }

    /// The game, with nature's rates calibrated when requested.
    pub fn game(&self) -> Result<EntryExitGame> {
        self.validate()?;
        let mut config = self.config.clone();
        if self.nature == NatureSource::Fit {
            let fit = calibrate_nature_rates(&am07_market_transition(), config.delta)?;
            log::info!(
                "calibrated nature rates: q_up {:.6}, q_down {:.6} (residual {:.3e})",
                fit.q_up,
                fit.q_down,
                fit.residual
            );
            config.q_up = fit.q_up;
            config.q_down = fit.q_down;
        }
        EntryExitGame::new(config)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let file: SpecFile = serde_json::from_str(&text)?;
        file.resolve()
    }
}

/// On-disk form of an [`ExperimentSpec`]: an optional preset plus overrides.
/// Custom specs (no `experiment`) must give `config` and `theta_true`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecFile {
    pub experiment: Option<u8>,
    pub scale: Option<Scale>,
    pub config: Option<GameConfig>,
    pub theta_true: Option<Theta>,
    pub sampling: Option<SamplingScheme>,
    pub markets: Option<usize>,
    pub replications: Option<usize>,
    pub estimators: Option<Vec<Estimator>>,
    pub seed: Option<u64>,
    pub events_per_market: Option<usize>,
    pub periods: Option<usize>,
    pub nature: Option<NatureSource>,
    pub ctnpl_init: Option<InitMethod>,
    pub max_stages: Option<usize>,
}

impl SpecFile {
    pub fn resolve(self) -> Result<ExperimentSpec> {
        let scale = self.scale.unwrap_or_default();
        let mut spec = match self.experiment {
            Some(e) => ExperimentSpec::preset(e, scale)?,
            None => {
                let (Some(config), Some(theta)) = (self.config.clone(), self.theta_true.clone())
                else {
                    return invalid("a custom spec needs both `config` and `theta_true`");
                };
                let mut s = ExperimentSpec::preset(1, scale)?;
                s.experiment = None;
                s.config = config;
                s.theta_true = theta;
                s
            }
        };
        if let Some(c) = self.config {
            spec.config = c;
        }
        if let Some(t) = self.theta_true {
            spec.theta_true = t;
        }
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { spec.$f = v; } )* };
        }
        set!(
            sampling,
            markets,
            replications,
            estimators,
            seed,
            events_per_market,
            periods,
            nature,
            ctnpl_init,
            max_stages
        );
        spec.validate()?;
        Ok(spec)
    }
}

/// Game and equilibrium at the spec's true parameters.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub game: EntryExitGame,
    pub solution: MpeSolution,
}

pub fn prepare(spec: &ExperimentSpec) -> Result<Prepared> {
    let game = spec.game()?;
    let solution = solve_at(&game, &spec.theta_true)?;
    Ok(Prepared { game, solution })
}

fn solve_at(game: &EntryExitGame, theta: &Theta) -> Result<MpeSolution> {
    let c = game.config();
    let init = CcpVector::uniform(c.n_players, 2, game.n_states());
    solve_mpe(
        game.structure(),
        &game.payoffs(theta)?,
        &init,
        &SolveOptions::default(),
    )
}

/// Simulated data of either kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Events(EventLog),
    Panel(Panel),
}

impl Dataset {
    pub fn sample(&self, delta: f64) -> Result<Sample> {
        match self {
            Dataset::Events(log) => Sample::from_log(log),
            Dataset::Panel(p) => Sample::from_panel(p, delta),
        }
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        match self {
            Dataset::Events(log) => log.write_csv(path),
            Dataset::Panel(p) => p.write_csv(path),
        }
    }

    pub fn file_name(&self) -> &'static str {
        match self {
            Dataset::Events(_) => "events.csv",
            Dataset::Panel(_) => "panel.csv",
        }
    }
}

pub fn simulate_dataset(spec: &ExperimentSpec, prep: &Prepared, seed: u64) -> Result<Dataset> {
    let s = prep.game.structure();
    let pay = prep.game.payoffs(&spec.theta_true)?;
    let sigma = &prep.solution.sigma;
    match spec.sampling {
        SamplingScheme::Continuous => {
            let opts = ContinuousSampling {
                markets: spec.markets,
                horizon: f64::INFINITY,
                max_events: Some(spec.events_per_market),
                initial: InitialStates::Stationary,
            };
            Ok(Dataset::Events(simulate_continuous(
                s, &pay, sigma, &opts, seed,
            )?))
        }
        SamplingScheme::Discrete => {
            let opts = DiscreteSampling {
                markets: spec.markets,
                periods: spec.periods,
                delta: spec.config.delta,
                initial: InitialStates::Stationary,
            };
            Ok(Dataset::Panel(sample_discrete(
                s, &pay, sigma, &opts, seed,
            )?))
        }
    }
}

/// Seed for random first-stage CCPs, distinct from the data seed.
fn init_seed(seed: u64) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15
}

/// One estimator applied to one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub estimator: Estimator,
    /// Flattened θ̂ (`θ_FC,1..N, θ_RS, θ_RN, θ_EC`); `None` on failure.
    pub theta: Option<Vec<f64>>,
    pub converged: bool,
    pub stages: usize,
    pub loglik: Option<f64>,
    pub error: Option<String>,
    #[serde(skip)]
    pub sigma: Option<CcpVector>,
}

pub fn estimate_one(
    spec: &ExperimentSpec,
    prep: &Prepared,
    sample: &Sample,
    estimator: Estimator,
    seed: u64,
) -> EstimateRecord {
    let (method, opts) = match estimator {
        Estimator::TwoStep(m) => (m, NplOptions::two_step()),
        Estimator::Ctnpl(m) => (
            m.unwrap_or(spec.ctnpl_init),
            NplOptions {
                max_stages: spec.max_stages,
                ..NplOptions::default()
            },
        ),
    };
    let g = &prep.game;
    let run = || {
        let sigma0 = init_ccp(
            method,
            g.space(),
            g.config().lambda,
            Some(sample),
            Some(&prep.solution.sigma),
            init_seed(seed),
        )?;
        ctnpl(g.structure(), g.payoff_design(), sample, &sigma0, &opts)
    };
    match run() {
        Ok(r) => EstimateRecord {
            estimator,
            theta: Some(r.theta_hat.to_vec()),
            converged: r.converged,
            stages: r.iterations,
            loglik: Some(r.loglik),
            error: None,
            sigma: Some(r.sigma_hat),
        },
        Err(e) => {
            log::warn!("{estimator} failed: {e}");
            EstimateRecord {
                estimator,
                theta: None,
                converged: false,
                stages: 0,
                loglik: None,
                error: Some(e.to_string()),
                sigma: None,
            }
        }
    }
}

/// Runs every listed estimator on the same dataset.
pub fn estimate_all(
    spec: &ExperimentSpec,
    prep: &Prepared,
    data: &Dataset,
    seed: u64,
) -> Result<Vec<EstimateRecord>> {
    let sample = data.sample(spec.config.delta)?;
    Ok(spec
        .estimators
        .iter()
        .map(|&e| estimate_one(spec, prep, &sample, e, seed))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRecord {
    pub replication: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub record: EstimateRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub estimator: Estimator,
    pub successes: usize,
    pub failures: usize,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    /// RMSE relative to 2S-True when that estimator was run.
    pub relative_rmse: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McResults {
    pub spec: ExperimentSpec,
    pub records: Vec<McRecord>,
    pub summaries: Vec<EstimatorSummary>,
    /// Replications whose data could not be generated.
    pub data_failures: Vec<(usize, String)>,
}

/// Monte Carlo: replication `r` uses seed `spec.seed + r`; all estimators
/// of a replication share its dataset.
pub fn run_mc(spec: &ExperimentSpec) -> Result<McResults> {
    let prep = prepare(spec)?;
    let outcomes: Vec<(usize, u64, Result<Vec<EstimateRecord>>)> = (0..spec.replications)
        .into_par_iter()
        .map(|r| {
            let seed = spec.seed.wrapping_add(r as u64);
            let out = simulate_dataset(spec, &prep, seed)
                .and_then(|d| estimate_all(spec, &prep, &d, seed));
            (r, seed, out)
        })
        .collect();
    let mut records = Vec::new();
    let mut data_failures = Vec::new();
    for (r, seed, out) in outcomes {
        match out {
            Ok(recs) => records.extend(recs.into_iter().map(|record| McRecord {
                replication: r,
                seed,
                record,
            })),
            Err(e) => {
                log::warn!("replication {r}: {e}");
                data_failures.push((r, e.to_string()));
            }
        }
    }
    let summaries = summarize(spec, &records)?;
    Ok(McResults {
        spec: spec.clone(),
        records,
        summaries,
        data_failures,
    })
}

fn summarize(spec: &ExperimentSpec, records: &[McRecord]) -> Result<Vec<EstimatorSummary>> {
    let mut by_est: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    let mut failures: BTreeMap<String, usize> = BTreeMap::new();
    for r in records {
        let name = r.record.estimator.to_string();
        match &r.record.theta {
            Some(t) => by_est.entry(name).or_default().push(t.clone()),
            None => *failures.entry(name).or_default() += 1,
        }
    }
    let truth = spec.theta_true.to_vec();
    let base = Estimator::TwoStep(InitMethod::True).to_string();
    let rel = if by_est.get(&base).is_some_and(|v| v.len() >= 2) {
        let eligible: BTreeMap<String, Vec<Vec<f64>>> = by_est
            .iter()
            .filter(|(_, v)| v.len() >= 2)
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Some(rmse_relative(&eligible, &base, &truth)?)
    } else {
        None
    };
    Ok(spec
        .estimators
        .iter()
        .map(|e| {
            let name = e.to_string();
            let reps = by_est.get(&name).cloned().unwrap_or_default();
            let (mean, sd) = mean_sd(&reps, truth.len());
            EstimatorSummary {
                estimator: *e,
                successes: reps.len(),
                failures: failures.get(&name).copied().unwrap_or(0),
                mean,
                sd,
                relative_rmse: rel.as_ref().and_then(|m| m.get(&name).cloned()),
            }
        })
        .collect())
}

fn mean_sd(reps: &[Vec<f64>], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = reps.len() as f64;
    let mean: Vec<f64> = (0..dim)
        .map(|c| reps.iter().map(|r| r[c]).sum::<f64>() / n)
        .collect();
    let sd = (0..dim)
        .map(|c| {
            if reps.len() < 2 {
                return f64::NAN;
            }
            (reps.iter().map(|r| (r[c] - mean[c]).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        })
        .collect();
    (mean, sd)
}

/// Positions of θ_FC,1, θ_RS, θ_EC and θ_RN in the flattened vector.
pub fn table_columns(n_players: usize) -> [usize; 4] {
    [
        0,
        Theta::rs_index(n_players),
        Theta::ec_index(n_players),
        Theta::rn_index(n_players),
    ]
}

pub const TABLE_HEADERS: [&str; 4] = ["θ_FC,1", "θ_RS", "θ_EC", "θ_RN"];

impl McResults {
    /// Means with standard deviations in parentheses.
    pub fn means_markdown(&self) -> String {
        let cols = table_columns(self.spec.config.n_players);
        let truth = self.spec.theta_true.to_vec();
        let mut s = format!(
            "| Estimator | {} | ok | failed |\n|---|---|---|---|---|---|---|\n",
            TABLE_HEADERS.join(" | ")
        );
        s += &format!(
            "| True values | {} | | |\n",
            cols.map(|c| format!("{:.4}", truth[c])).join(" | ")
        );
        for e in &self.summaries {
            let cells = cols.map(|c| {
                format!(
                    "{:.4} ({:.4})",
                    e.mean.get(c).copied().unwrap_or(f64::NAN),
                    e.sd.get(c).copied().unwrap_or(f64::NAN)
                )
            });
            s += &format!(
                "| {} | {} | {} | {} |\n",
                e.estimator,
                cells.join(" | "),
                e.successes,
                e.failures
            );
        }
        s
    }

    pub fn rmse_markdown(&self) -> Option<String> {
        let cols = table_columns(self.spec.config.n_players);
        let rows: Vec<_> = self
            .summaries
            .iter()
            .filter(|e| e.estimator != Estimator::TwoStep(InitMethod::True))
            .filter_map(|e| e.relative_rmse.as_ref().map(|r| (e.estimator, r)))
            .collect();
        if rows.is_empty() {
            return None;
        }
        let mut s = format!(
            "| Estimator | {} |\n|---|---|---|---|---|\n",
            TABLE_HEADERS.join(" | ")
        );
        for (e, r) in rows {
            s += &format!(
                "| {} | {} |\n",
                e,
                cols.map(|c| format!("{:.4}", r[c])).join(" | ")
            );
        }
        Some(s)
    }

    /// Writes `mc_raw.csv`, `mc_summary.csv`, `mc_tables.md` and `mc_results.json`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let n = self.spec.config.n_players;
        let names = Theta::parameter_names(n);

        let mut w = csv::Writer::from_path(dir.join("mc_raw.csv"))?;
        let mut header = vec![
            "replication".to_string(),
            "seed".into(),
            "estimator".into(),
            "status".into(),
            "converged".into(),
            "stages".into(),
            "loglik".into(),
        ];
        header.extend(names.iter().cloned());
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![
                r.replication.to_string(),
                r.seed.to_string(),
                r.record.estimator.to_string(),
                if r.record.theta.is_some() {
                    "ok".into()
                } else {
                    "failed".into()
                },
                r.record.converged.to_string(),
                r.record.stages.to_string(),
                r.record.loglik.map(|v| v.to_string()).unwrap_or_default(),
            ];
            match &r.record.theta {
                Some(t) => row.extend(t.iter().map(|v| v.to_string())),
                None => row.extend(std::iter::repeat_n(String::new(), names.len())),
            }
            w.write_record(&row)?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("mc_summary.csv"))?;
        let mut header = vec![
            "estimator".to_string(),
            "statistic".into(),
            "successes".into(),
            "failures".into(),
        ];
        header.extend(names.iter().cloned());
        w.write_record(&header)?;
        for e in &self.summaries {
            let mut stats = vec![("mean", &e.mean), ("sd", &e.sd)];
            if let Some(r) = &e.relative_rmse {
                stats.push(("relative_rmse", r));
            }
            for (label, vals) in stats {
                let mut row = vec![
                    e.estimator.to_string(),
                    label.into(),
                    e.successes.to_string(),
                    e.failures.to_string(),
                ];
                row.extend(vals.iter().map(|v| v.to_string()));
                w.write_record(&row)?;
            }
        }
        w.flush()?;

        let title = match self.spec.experiment {
            Some(x) => format!("Experiment {x}"),
            None => "Custom experiment".into(),
        };
        let mut md = format!(
            "# {title}: {} data, M = {}, R = {}\n\n## Means (sd)\n\n{}",
            match self.spec.sampling {
                SamplingScheme::Continuous => "continuous",
                SamplingScheme::Discrete => "discrete",
            },
            self.spec.markets,
            self.spec.replications,
            self.means_markdown()
        );
        if let Some(r) = self.rmse_markdown() {
            md += &format!("\n## RMSE relative to 2S-True\n\n{r}");
        }
        if !self.data_failures.is_empty() {
            md += &format!(
                "\n{} replication(s) failed before estimation.\n",
                self.data_failures.len()
            );
        }
        fs::write(dir.join("mc_tables.md"), md)?;
        write_json(dir.join("mc_results.json"), self)
    }
}

fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Output of [`run_solve`].
#[derive(Debug, Clone)]
pub struct SolveArtifacts {
    pub spec: ExperimentSpec,
    pub prepared: Prepared,
    pub steady_state: Vec<f64>,
    pub stats: DescriptiveStats,
    /// `‖Ψσ‖∞` at the solution; computed for single-agent games only.
    pub single_agent_jacobian: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveSummary {
    pub n_states: usize,
    pub iterations: usize,
    pub residual: f64,
    pub damping: f64,
    pub stationary: DescriptiveStats,
    pub single_agent_jacobian: Option<f64>,
    pub residual_trace: Vec<f64>,
}

pub fn run_solve(spec: &ExperimentSpec) -> Result<SolveArtifacts> {
    let prepared = prepare(spec)?;
    let s = prepared.game.structure();
    let pi = steady_state(s, &prepared.solution.sigma)?;
    let p = transition_matrix(
        &crate::equilibrium::aggregate_generator(s, &prepared.solution.sigma)?,
        spec.config.delta,
    )?;
    let stats = stationary_stats(prepared.game.space(), &pi, p.matrix())?;
    let single_agent_jacobian = if spec.config.n_players == 1 {
        let j = jacobian_psi(
            s,
            prepared.game.payoff_design(),
            &spec.theta_true.to_vec(),
            &prepared.solution.sigma,
            Wrt::Sigma,
            FD_STEP,
        )?;
        Some(j.amax())
    } else {
        None
    };
    Ok(SolveArtifacts {
        spec: spec.clone(),
        prepared,
        steady_state: pi.iter().copied().collect(),
        stats,
        single_agent_jacobian,
    })
}

impl SolveArtifacts {
    pub fn summary(&self) -> SolveSummary {
        let sol = &self.prepared.solution;
        SolveSummary {
            n_states: self.prepared.game.n_states(),
            iterations: sol.iterations,
            residual: sol.residual,
            damping: sol.damping,
            stationary: self.stats.clone(),
            single_agent_jacobian: self.single_agent_jacobian,
            residual_trace: sol.trace.clone(),
        }
    }

    /// Writes `sigma.csv`, `values.csv`, `steady_state.csv` and `solve.json`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let sol = &self.prepared.solution;
        let (n, kn) = (self.spec.config.n_players, self.prepared.game.n_states());

        let mut w = csv::Writer::from_path(dir.join("sigma.csv"))?;
        w.write_record(["player", "choice", "state", "prob"])?;
        for i in 0..n {
            for j in 0..2 {
                for k in 0..kn {
                    w.write_record([
                        i.to_string(),
                        j.to_string(),
                        k.to_string(),
                        sol.sigma.get(i, j, k).to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("values.csv"))?;
        let mut header = vec!["state".to_string()];
        header.extend((1..=n).map(|i| format!("v_{i}")));
        w.write_record(&header)?;
        for k in 0..kn {
            let mut row = vec![k.to_string()];
            row.extend((0..n).map(|i| sol.values.get(i, k).to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("steady_state.csv"))?;
        w.write_record(["state", "level", "active", "prob"])?;
        let space = self.prepared.game.space();
        for (k, p) in self.steady_state.iter().enumerate() {
            w.write_record([
                k.to_string(),
                space.level(k).to_string(),
                space.active_count(k).to_string(),
                p.to_string(),
            ])?;
        }
        w.flush()?;
        write_json(dir.join("solve.json"), &self.summary())
    }
}

/// Output of [`run_simulate`].
#[derive(Debug, Clone)]
pub struct SimulationArtifacts {
    pub data: Dataset,
    /// Sample statistics on the snapshot panel (continuous data are
    /// snapshotted at their initial and final states).
    pub sample_stats: Option<DescriptiveStats>,
    pub stationary: DescriptiveStats,
}

pub fn run_simulate(spec: &ExperimentSpec) -> Result<SimulationArtifacts> {
    let prep = prepare(spec)?;
    let data = simulate_dataset(spec, &prep, spec.seed)?;
    let space = prep.game.space();
    let sample_stats = match &data {
        Dataset::Panel(p) => Some(crate::simulate::descriptive_stats(p, space)?),
        Dataset::Events(_) => None,
    };
    let s = prep.game.structure();
    let pi = steady_state(s, &prep.solution.sigma)?;
    let p = transition_matrix(
        &crate::equilibrium::aggregate_generator(s, &prep.solution.sigma)?,
        spec.config.delta,
    )?;
    Ok(SimulationArtifacts {
        data,
        sample_stats,
        stationary: stationary_stats(space, &pi, p.matrix())?,
    })
}

impl SimulationArtifacts {
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        self.data.write_csv(dir.join(self.data.file_name()))?;
        #[derive(Serialize)]
        struct Out<'a> {
            sample: &'a Option<DescriptiveStats>,
            stationary: &'a DescriptiveStats,
        }
        write_json(
            dir.join("stats.json"),
            &Out {
                sample: &self.sample_stats,
                stationary: &self.stationary,
            },
        )
    }
}

/// Reads data written by `simulate` for the spec's sampling scheme.
pub fn read_dataset(
    spec: &ExperimentSpec,
    game: &EntryExitGame,
    path: impl AsRef<Path>,
) -> Result<Dataset> {
    match spec.sampling {
        SamplingScheme::Continuous => {
            Ok(Dataset::Events(EventLog::read_csv(path, game.structure())?))
        }
        SamplingScheme::Discrete => Ok(Dataset::Panel(Panel::read_csv(path, game.n_states())?)),
    }
}

pub fn write_estimates(
    dir: impl AsRef<Path>,
    spec: &ExperimentSpec,
    records: &[EstimateRecord],
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let names = Theta::parameter_names(spec.config.n_players);
    let mut w = csv::Writer::from_path(dir.join("estimates.csv"))?;
    let mut header = vec![
        "estimator".to_string(),
        "status".into(),
        "converged".into(),
        "stages".into(),
        "loglik".into(),
    ];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.estimator.to_string(),
            if r.theta.is_some() {
                "ok".into()
            } else {
                "failed".into()
            },
            r.converged.to_string(),
            r.stages.to_string(),
            r.loglik.map(|v| v.to_string()).unwrap_or_default(),
        ];
        match &r.theta {
            Some(t) => row.extend(t.iter().map(|v| v.to_string())),
            None => row.extend(std::iter::repeat_n(String::new(), names.len())),
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    write_json(dir.join("estimates.json"), &records)
}

/// How the counterfactual policy changes fixed costs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostShift {
    /// Change in fixed cost; `−0.2` lowers costs by 0.2 (θ_FC,i rises by 0.2).
    FixedCost(f64),
    /// Fixed costs fall by this share of the entry cost θ_EC.
    SubsidyShare(f64),
}

impl CostShift {
    /// Amount added to every θ_FC,i.
    pub fn fc_increment(&self, theta: &Theta) -> f64 {
        match *self {
            CostShift::FixedCost(d) => -d,
            CostShift::SubsidyShare(s) => s * theta.ec,
        }
    }
}

pub const COUNTERFACTUAL_DRAWS: usize = 50_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualReport {
    pub shift: CostShift,
    pub fc_increment: f64,
    pub draws: usize,
    pub before_mean: f64,
    pub before_sd: f64,
    pub after_mean: f64,
    pub after_sd: f64,
    pub pct_change: f64,
    /// Steady-state means computed exactly from π.
    pub exact_before: f64,
    pub exact_after: f64,
    pub exact_pct_change: f64,
}

fn draw_active(game: &EntryExitGame, pi: &[f64], draws: usize, seed: u64) -> Result<(f64, f64)> {
    if draws < 2 {
        return invalid("need at least two draws");
    }
    let w = WeightedIndex::new(pi.iter().copied()).map_err(|e| Error::Numeric(e.to_string()))?;
    let mut rng = market_rng(seed, 0);
    let xs: Vec<f64> = (0..draws)
        .map(|_| game.space().active_count(w.sample(&mut rng)) as f64)
        .collect();
    let m = xs.iter().sum::<f64>() / draws as f64;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (draws as f64 - 1.0);
    Ok((m, v.sqrt()))
}

/// Steady-state number of active firms at `theta` and after the policy.
pub fn run_counterfactual(
    spec: &ExperimentSpec,
    theta: &Theta,
    shift: CostShift,
    draws: usize,
    seed: u64,
) -> Result<CounterfactualReport> {
    let game = spec.game()?;
    theta.validate(spec.config.n_players)?;
    let inc = shift.fc_increment(theta);
    let after_theta = Theta {
        fc: theta.fc.iter().map(|f| f + inc).collect(),
        ..theta.clone()
    };
    let before = solve_at(&game, theta)?;
    let after = solve_at(&game, &after_theta)?;
    let s = game.structure();
    let pb: Vec<f64> = steady_state(s, &before.sigma)?.iter().copied().collect();
    let pa: Vec<f64> = steady_state(s, &after.sigma)?.iter().copied().collect();
    let exact = |pi: &[f64]| {
        pi.iter()
            .enumerate()
            .map(|(k, p)| p * game.space().active_count(k) as f64)
            .sum::<f64>()
    };
    // common random numbers: both scenarios see the same uniforms
    let (bm, bsd) = draw_active(&game, &pb, draws, seed)?;
    let (am, asd) = draw_active(&game, &pa, draws, seed)?;
    let (eb, ea) = (exact(&pb), exact(&pa));
    Ok(CounterfactualReport {
        shift,
        fc_increment: inc,
        draws,
        before_mean: bm,
        before_sd: bsd,
        after_mean: am,
        after_sd: asd,
        pct_change: 100.0 * (am - bm) / bm,
        exact_before: eb,
        exact_after: ea,
        exact_pct_change: 100.0 * (ea - eb) / eb,
    })
}

impl CounterfactualReport {
    pub fn markdown(&self) -> String {
        format!(
            "| | Before | After | % change |\n|---|---|---|---|\n| Mean #active | {:.2} | {:.2} | {:.1} |\n| SD #active | {:.2} | {:.2} | |\n| Exact mean | {:.4} | {:.4} | {:.2} |\n",
            self.before_mean, self.after_mean, self.pct_change, self.before_sd, self.after_sd, self.exact_before, self.exact_after, self.exact_pct_change
        )
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("counterfactual.md"), self.markdown())?;
        write_json(dir.join("counterfactual.json"), self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseReport {
    pub sweep: Vec<SweepRow>,
    /// Stability objects at the spec's θ and its equilibrium.
    pub stability: Option<StabilityReport>,
    pub stability_error: Option<String>,
}

pub const DEFAULT_RN_GRID: [f64; 6] = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0];

pub fn run_diagnose(spec: &ExperimentSpec, grid: &[f64]) -> Result<DiagnoseReport> {
    let game = spec.game()?;
    let sweep = stability_sweep(
        game.config(),
        &spec.theta_true,
        grid,
        &SolveOptions::default(),
    )?;
    let stab = solve_at(&game, &spec.theta_true).and_then(|sol| {
        stability_report(
            game.structure(),
            game.payoff_design(),
            &spec.theta_true.to_vec(),
            &sol.sigma,
            spec.config.delta,
            FD_STEP,
        )
    });
    let (stability, stability_error) = match stab {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e.to_string())),
    };
    Ok(DiagnoseReport {
        sweep,
        stability,
        stability_error,
    })
}

impl DiagnoseReport {
    /// Writes `stability_sweep.csv` and `stability.json`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("stability_sweep.csv"))?;
        w.write_record([
            "theta_rn",
            "rho_psi_sigma",
            "avg_active",
            "mpe_iterations",
            "damping",
            "error",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.sweep {
            w.write_record([
                r.theta_rn.to_string(),
                opt(r.rho_psi_sigma),
                opt(r.avg_active),
                r.mpe_iterations.map(|x| x.to_string()).unwrap_or_default(),
                opt(r.damping),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        write_json(dir.join("stability.json"), self)
    }
}
