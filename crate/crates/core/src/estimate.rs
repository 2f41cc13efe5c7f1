//! CCP initializers, the inner pseudo-likelihood maximization and the
//! nested pseudo-likelihood (CTNPL) outer loop.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::equilibrium::{CcpVector, GameStructure, PayoffDesign, PsiLinearization};
use crate::error::{invalid, Error, Result};
use crate::likelihood::{loglik_continuous_at, loglik_discrete_at, EventSummary, TransitionCounts};
use crate::optimize::{minimize, BfgsOptions, Minimum};
use crate::simulate::{EventKind, EventLog, Panel};
use crate::state_model::{StateSpace, Theta};

/// Initializer outputs are clamped into `[CCP_FLOOR, 1 − CCP_FLOOR]`.
pub const CCP_FLOOR: f64 = 1e-6;

/// Data in the form the likelihoods consume.
#[derive(Debug, Clone, PartialEq)]
pub enum Sample {
    Continuous(EventSummary),
    Discrete {
        counts: TransitionCounts,
        delta: f64,
    },
}

impl Sample {
    pub fn from_log(log: &EventLog) -> Result<Self> {
        Ok(Sample::Continuous(EventSummary::from_log(log)?))
    }

    pub fn from_panel(panel: &Panel, delta: f64) -> Result<Self> {
        if !(delta > 0.0) {
            return invalid("sampling interval must be positive");
        }
        Ok(Sample::Discrete {
            counts: TransitionCounts::from_panel(panel)?,
            delta,
        })
    }

    pub fn n_states(&self) -> usize {
        match self {
            Sample::Continuous(s) => s.time_in_state.len(),
            Sample::Discrete { counts, .. } => counts.counts.nrows(),
        }
    }

    /// Log-likelihood at best-response probabilities `σ̃`.
    pub fn loglik_at(&self, s: &GameStructure, sigma_tilde: &CcpVector) -> Result<f64> {
        match self {
            Sample::Continuous(d) => Ok(loglik_continuous_at(s, sigma_tilde, d)?.total),
            Sample::Discrete { counts, delta } => {
                Ok(loglik_discrete_at(s, sigma_tilde, counts, *delta)?.total)
            }
        }
    }

    /// Per (player, state): moves observed and opportunities to move.
    ///
    /// Continuous data give move counts over `λ·time in state`; snapshot
    /// data give activity switches over visits to the state.
    fn move_counts(&self, space: &StateSpace, lambda: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        let (n, kn) = (space.n_players(), space.n_states());
        let mut moves = DMatrix::zeros(n, kn);
        let mut trials = DMatrix::zeros(n, kn);
        match self {
            Sample::Continuous(d) => {
                for (&(k, kind), &c) in &d.counts {
                    if let EventKind::Player { player, choice: 1 } = kind {
                        moves[(player, k)] += c as f64;
                    }
                }
                for i in 0..n {
                    for k in 0..kn {
                        trials[(i, k)] = lambda * d.time_in_state[k];
                    }
                }
            }
            Sample::Discrete { counts, .. } => {
                for k in 0..kn {
                    for l in 0..kn {
                        let c = counts.counts[(k, l)];
                        if c == 0.0 {
                            continue;
                        }
                        for i in 0..n {
                            trials[(i, k)] += c;
                            if space.is_active(i, k) != space.is_active(i, l) {
                                moves[(i, k)] += c;
                            }
                        }
                    }
                }
            }
        }
        (moves, trials)
    }
}

/// First-stage CCP estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMethod {
    True,
    Frequency,
    Logit,
    Random,
}

impl std::str::FromStr for InitMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "true" => Ok(InitMethod::True),
            "frequency" | "freq" => Ok(InitMethod::Frequency),
            "logit" => Ok(InitMethod::Logit),
            "random" => Ok(InitMethod::Random),
            other => invalid(format!("unknown CCP initializer '{other}'")),
        }
    }
}

fn ccp_from_move_probs(space: &StateSpace, p: &DMatrix<f64>) -> Result<CcpVector> {
    let free: Vec<f64> = (0..space.n_players())
        .flat_map(|i| (0..space.n_states()).map(move |k| (i, k)))
        .map(|(i, k)| p[(i, k)].clamp(CCP_FLOOR, 1.0 - CCP_FLOOR))
        .collect();
    CcpVector::from_free(space.n_players(), 2, space.n_states(), &free)
}

/// Hazard-ratio (continuous) or add-one smoothed switching frequency
/// (snapshots). Unvisited states get 0.5.
pub fn frequency_ccp(space: &StateSpace, lambda: f64, data: &Sample) -> Result<CcpVector> {
    if data.n_states() != space.n_states() {
        return invalid("data and state space disagree on the number of states");
    }
    let (moves, trials) = data.move_counts(space, lambda);
    let smooth = matches!(data, Sample::Discrete { .. });
    let p = DMatrix::from_fn(space.n_players(), space.n_states(), |i, k| {
        let (m, t) = (moves[(i, k)], trials[(i, k)]);
        if smooth {
            (m + 1.0) / (t + 2.0)
        } else if t > 0.0 {
            m / t
        } else {
            0.5
        }
    });
    ccp_from_move_probs(space, &p)
}

fn logit_regressors(space: &StateSpace, i: usize, k: usize) -> Vec<f64> {
    let n = space.n_players();
    let mut x = vec![0.0; n + 5];
    x[i] = 1.0;
    let d = space.level(k) as f64;
    let r = (1.0 + space.active_rivals(i, k) as f64).ln();
    let a = if space.is_active(i, k) { 1.0 } else { 0.0 };
    x[n] = d;
    x[n + 1] = r;
    x[n + 2] = a;
    x[n + 3] = a * d;
    x[n + 4] = a * r;
    x
}

/// Pooled binomial logit of moves on firm dummies, demand level,
/// `ln(1 + rivals)`, own activity and its interactions, fitted by Newton.
pub fn logit_ccp(space: &StateSpace, lambda: f64, data: &Sample) -> Result<CcpVector> {
    if data.n_states() != space.n_states() {
        return invalid("data and state space disagree on the number of states");
    }
    let (moves, trials) = data.move_counts(space, lambda);
    let (n, kn) = (space.n_players(), space.n_states());
    let p = n + 5;
    let rows: Vec<(Vec<f64>, f64, f64)> = (0..n)
        .flat_map(|i| (0..kn).map(move |k| (i, k)))
        .filter(|&(i, k)| trials[(i, k)] > 0.0)
        .map(|(i, k)| {
            let t = trials[(i, k)];
            let m = moves[(i, k)].min(t);
            (logit_regressors(space, i, k), m, t)
        })
        .collect();
    if rows.is_empty() {
        return invalid("no observations for the logit initializer");
    }

    let mut beta = DVector::<f64>::zeros(p);
    let ridge = 1e-8;
    let objective = |b: &DVector<f64>| -> f64 {
        rows.iter()
            .map(|(x, m, t)| {
                let z: f64 = x.iter().zip(b.iter()).map(|(a, c)| a * c).sum();
                // m·ln σ + (t − m)·ln(1 − σ)
                m * z - t * softplus(z)
            })
            .sum::<f64>()
            - 0.5 * ridge * b.norm_squared()
    };
    let mut f = objective(&beta);
    for _ in 0..100 {
        let mut g = -ridge * &beta;
        let mut h = DMatrix::<f64>::identity(p, p) * ridge;
        for (x, m, t) in &rows {
            let xv = DVector::from_column_slice(x);
            let z = xv.dot(&beta);
            let s = logistic(z);
            g += &xv * (m - t * s);
            h += &xv * xv.transpose() * (t * s * (1.0 - s));
        }
        let Some(step) = h.clone().cholesky().map(|c| c.solve(&g)) else {
            return Err(Error::Numeric(
                "logit information matrix is not positive definite".into(),
            ));
        };
        let mut a = 1.0;
        let mut improved = false;
        for _ in 0..40 {
            let cand = &beta + &step * a;
            let fc = objective(&cand);
            if fc >= f - 1e-12 * f.abs() {
                beta = cand;
                improved = fc > f;
                f = fc;
                break;
            }
            a *= 0.5;
        }
        if !improved || g.amax() < 1e-10 {
            break;
        }
    }
    let probs = DMatrix::from_fn(n, kn, |i, k| {
        let z: f64 = logit_regressors(space, i, k)
            .iter()
            .zip(beta.iter())
            .map(|(a, c)| a * c)
            .sum();
        logistic(z)
    });
    ccp_from_move_probs(space, &probs)
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Independent Uniform(0, 1) draws for every `σ_i1k`.
pub fn random_ccp(space: &StateSpace, seed: u64) -> Result<CcpVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = DMatrix::from_fn(space.n_players(), space.n_states(), |_, _| {
        rng.random::<f64>()
    });
    ccp_from_move_probs(space, &p)
}

/// Dispatches to the chosen initializer.
pub fn init_ccp(
    method: InitMethod,
    space: &StateSpace,
    lambda: f64,
    data: Option<&Sample>,
    sigma_star: Option<&CcpVector>,
    seed: u64,
) -> Result<CcpVector> {
    match method {
        InitMethod::True => sigma_star
            .cloned()
            .ok_or_else(|| Error::InvalidArgument("true CCPs requested but none supplied".into())),
        InitMethod::Random => random_ccp(space, seed),
        InitMethod::Frequency => match data {
            Some(d) => frequency_ccp(space, lambda, d),
            None => invalid("frequency CCPs need data"),
        },
        InitMethod::Logit => match data {
            Some(d) => logit_ccp(space, lambda, d),
            None => invalid("logit CCPs need data"),
        },
    }
}

/// Inner maximization result.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoMaximum {
    pub theta: Vec<f64>,
    /// Ψ(θ̂, σ_prev).
    pub sigma: CcpVector,
    pub loglik: f64,
    pub optimizer: Minimum,
}

/// `argmax_θ L(θ, σ_prev)` through the linear-in-θ representation of the
/// value function at `σ_prev`.
pub fn maximize_pseudo_likelihood(
    s: &GameStructure,
    design: &PayoffDesign,
    sigma_prev: &CcpVector,
    data: &Sample,
    theta_init: &[f64],
    opts: &BfgsOptions,
) -> Result<PseudoMaximum> {
    if theta_init.len() != design.n_params() {
        return invalid(format!(
            "expected {} starting values, got {}",
            design.n_params(),
            theta_init.len()
        ));
    }
    if data.n_states() != s.n_states() {
        return invalid("data and game disagree on the number of states");
    }
    let lin = PsiLinearization::new(s, design, sigma_prev)?;
    let objective = |th: &[f64]| -> f64 {
        match lin.evaluate(th).and_then(|sig| data.loglik_at(s, &sig)) {
            Ok(v) => -v,
            Err(_) => f64::INFINITY,
        }
    };
    let m = minimize(objective, theta_init, opts)?;
    let sigma = lin.evaluate(&m.x)?;
    Ok(PseudoMaximum {
        theta: m.x.clone(),
        sigma,
        loglik: -m.value,
        optimizer: m,
    })
}

/// Settings for [`ctnpl`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NplOptions {
    pub max_stages: usize,
    pub tol: f64,
    /// Stage-1 starting point; all ones when `None`.
    pub theta_start: Option<Vec<f64>>,
    /// Start later stages from the previous stage's estimate.
    pub warm_start: bool,
    pub bfgs: BfgsOptions,
}

/// Stages beyond this are refused.
pub const MAX_STAGES_CAP: usize = 100;

impl Default for NplOptions {
    fn default() -> Self {
        Self {
            max_stages: 20,
            tol: 1e-6,
            theta_start: None,
            warm_start: true,
            bfgs: BfgsOptions::default(),
        }
    }
}

impl NplOptions {
    /// Two-step pseudo maximum likelihood: a single stage.
    pub fn two_step() -> Self {
        Self {
            max_stages: 1,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    pub stage: usize,
    pub sigma_delta: f64,
    pub theta_delta: f64,
    pub loglik: f64,
    pub optimizer_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationResult {
    pub theta_hat: Theta,
    pub sigma_hat: CcpVector,
    /// Stages run.
    pub iterations: usize,
    pub converged: bool,
    /// Stage of the returned estimate.
    pub stage: usize,
    pub loglik: f64,
    pub trace: Vec<StageTrace>,
}

/// Alternates `θ^l = argmax L(θ, σ^{l−1})` and `σ^l = Ψ(θ^l, σ^{l−1})`
/// until both sup-norm changes fall below `tol`.
///
/// Without convergence the highest-likelihood stage is returned with
/// `converged = false`.
pub fn ctnpl(
    s: &GameStructure,
    design: &PayoffDesign,
    data: &Sample,
    sigma0: &CcpVector,
    opts: &NplOptions,
) -> Result<EstimationResult> {
    if opts.max_stages == 0 || opts.max_stages > MAX_STAGES_CAP {
        return invalid(format!("max_stages must be in 1..={MAX_STAGES_CAP}"));
    }
    if !(opts.tol > 0.0) {
        return invalid("tolerance must be positive");
    }
    sigma0.validate(1e-9)?;
    let p = design.n_params();
    let mut theta = opts.theta_start.clone().unwrap_or_else(|| vec![1.0; p]);
    let ones = vec![1.0; p];
    let mut sigma = sigma0.clone();
    let mut trace = Vec::new();
    let mut best: Option<(f64, usize, Vec<f64>, CcpVector)> = None;

    for stage in 1..=opts.max_stages {
        let start = if stage == 1 || opts.warm_start {
            theta.clone()
        } else {
            opts.theta_start.clone().unwrap_or(ones.clone())
        };
        let inner = maximize_pseudo_likelihood(s, design, &sigma, data, &start, &opts.bfgs)
            .map_err(|e| Error::Stage {
                stage,
                source: Box::new(e),
            })?;
        let sigma_delta = inner.sigma.max_abs_diff(&sigma);
        let theta_delta = inner
            .theta
            .iter()
            .zip(&theta)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        trace.push(StageTrace {
            stage,
            sigma_delta,
            theta_delta,
            loglik: inner.loglik,
            optimizer_iterations: inner.optimizer.iterations,
        });
        log::debug!(
            "stage {stage}: dsigma {sigma_delta:.3e}, dtheta {theta_delta:.3e}, loglik {:.6}",
            inner.loglik
        );
        theta = inner.theta;
        sigma = inner.sigma;
        if best.as_ref().is_none_or(|b| inner.loglik > b.0) {
            best = Some((inner.loglik, stage, theta.clone(), sigma.clone()));
        }
        if sigma_delta < opts.tol && theta_delta < opts.tol {
            return Ok(EstimationResult {
                theta_hat: Theta::from_slice(&theta)?,
                sigma_hat: sigma,
                iterations: stage,
                converged: true,
                stage,
                loglik: inner.loglik,
                trace,
            });
        }
    }
    let (loglik, stage, theta, sigma) = best.expect("at least one stage ran");
    if opts.max_stages > 1 {
        log::info!(
            "CTNPL did not converge in {} stages; returning stage {stage}",
            opts.max_stages
        );
    }
    Ok(EstimationResult {
        theta_hat: Theta::from_slice(&theta)?,
        sigma_hat: sigma,
        iterations: opts.max_stages,
        converged: false,
        stage,
        loglik,
        trace,
    })
}

/// Per-parameter RMSE of every estimator divided by the baseline's RMSE.
pub fn rmse_relative(
    results: &BTreeMap<String, Vec<Vec<f64>>>,
    baseline: &str,
    theta_true: &[f64],
) -> Result<BTreeMap<String, Vec<f64>>> {
    let rmse = |reps: &Vec<Vec<f64>>| -> Result<Vec<f64>> {
        if reps.len() < 2 {
            return invalid("need at least two replications per estimator");
        }
        if reps.iter().any(|r| r.len() != theta_true.len()) {
            return invalid("replication length does not match theta");
        }
        Ok((0..theta_true.len())
            .map(|c| {
                (reps
                    .iter()
                    .map(|r| (r[c] - theta_true[c]).powi(2))
                    .sum::<f64>()
                    / reps.len() as f64)
                    .sqrt()
            })
            .collect())
    };
    let base = rmse(
        results
            .get(baseline)
            .ok_or_else(|| Error::InvalidArgument(format!("baseline '{baseline}' missing")))?,
    )?;
    results
        .iter()
        .map(|(name, reps)| {
            Ok((
                name.clone(),
                rmse(reps)?.iter().zip(&base).map(|(a, b)| a / b).collect(),
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::{psi_map, solve_mpe, SolveOptions};
    use crate::simulate::{
        sample_discrete, simulate_continuous, ContinuousSampling, DiscreteSampling, Event,
        InitialStates, MarketPath,
    };
    use crate::state_model::{EntryExitGame, GameConfig};
    use approx::assert_relative_eq;

    fn game(n: usize, levels: usize) -> EntryExitGame {
        EntryExitGame::new(GameConfig {
            n_players: n,
            n_choices: 2,
            market_levels: levels,
            lambda: 1.0,
            rho: 0.05,
            q_up: 0.2,
            q_down: 0.2,
            delta: 1.0,
        })
        .unwrap()
    }

    fn theta3() -> Theta {
        Theta {
            fc: vec![-1.9, -1.8, -1.7],
            rs: 1.0,
            rn: 1.0,
            ec: 1.0,
        }
    }

    fn solved(g: &EntryExitGame, th: &Theta) -> CcpVector {
        let n = g.config().n_players;
        solve_mpe(
            g.structure(),
            &g.payoffs(th).unwrap(),
            &CcpVector::uniform(n, 2, g.n_states()),
            &SolveOptions::default(),
        )
        .unwrap()
        .sigma
    }

    #[test]
    fn true_and_random_initializers() {
        let g = game(3, 3);
        let sig = solved(&g, &theta3());
        let t = init_ccp(InitMethod::True, g.space(), 1.0, None, Some(&sig), 0).unwrap();
        assert_eq!(t, sig);
        let a = init_ccp(InitMethod::Random, g.space(), 1.0, None, None, 42).unwrap();
        let b = init_ccp(InitMethod::Random, g.space(), 1.0, None, None, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.validate(1e-12).is_ok());
        assert!(init_ccp(InitMethod::Frequency, g.space(), 1.0, None, None, 0).is_err());
        assert!(init_ccp(InitMethod::Logit, g.space(), 1.0, None, None, 0).is_err());
        assert!(init_ccp(InitMethod::True, g.space(), 1.0, None, None, 0).is_err());
    }

    #[test]
    fn frequency_hazard_ratio_by_hand() {
        // one player, one level: three entries/exits observed in state 0 over six time units
        let g = game(1, 1);
        let mut events = Vec::new();
        let mut t = 0.0;
        let mut k = 0;
        for _ in 0..3 {
            t += 2.0;
            events.push(Event {
                pre_state: k,
                post_state: 1 - k,
                time: t,
                kind: EventKind::Player {
                    player: 0,
                    choice: 1,
                },
            });
            k = 1 - k;
            // leave immediately so that all time is spent in state 0
            t += 1e-12;
            events.push(Event {
                pre_state: k,
                post_state: 1 - k,
                time: t,
                kind: EventKind::Player {
                    player: 0,
                    choice: 1,
                },
            });
            k = 1 - k;
        }
        let log = EventLog {
            n_states: 2,
            markets: vec![MarketPath {
                initial_state: 0,
                horizon: t,
                events,
            }],
        };
        let sig = frequency_ccp(g.space(), 1.0, &Sample::from_log(&log).unwrap()).unwrap();
        assert_relative_eq!(sig.get(0, 1, 0), 0.5, epsilon = 1e-9);
    }

    #[test]
    fn discrete_frequency_is_add_one_smoothed() {
        let g = game(1, 1);
        let panel = Panel::new(2, vec![vec![0, 1], vec![0, 0], vec![0, 0]]).unwrap();
        let sig = frequency_ccp(g.space(), 1.0, &Sample::from_panel(&panel, 1.0).unwrap()).unwrap();
        assert_relative_eq!(sig.get(0, 1, 0), 2.0 / 5.0, epsilon = 1e-15);
        assert_relative_eq!(sig.get(0, 1, 1), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn logit_initializer_tracks_truth_on_large_sample() {
        let g = game(3, 3);
        let th = theta3();
        let sig = solved(&g, &th);
        let pay = g.payoffs(&th).unwrap();
        let log = simulate_continuous(
            g.structure(),
            &pay,
            &sig,
            &ContinuousSampling {
                markets: 2000,
                horizon: 50.0,
                max_events: None,
                initial: InitialStates::Stationary,
            },
            1,
        )
        .unwrap();
        let data = Sample::from_log(&log).unwrap();
        let lg = logit_ccp(g.space(), 1.0, &data).unwrap();
        assert!(lg.validate(1e-12).is_ok());
        assert!(lg.max_abs_diff(&sig) < 0.1, "{}", lg.max_abs_diff(&sig));
    }

    #[test]
    fn two_step_from_truth_recovers_theta() {
        let g = game(3, 3);
        let th = theta3();
        let sig = solved(&g, &th);
        let pay = g.payoffs(&th).unwrap();
        let panel = sample_discrete(
            g.structure(),
            &pay,
            &sig,
            &DiscreteSampling {
                markets: 20_000,
                periods: 5,
                ..Default::default()
            },
            3,
        )
        .unwrap();
        let data = Sample::from_panel(&panel, 1.0).unwrap();
        let res = ctnpl(
            g.structure(),
            g.payoff_design(),
            &data,
            &sig,
            &NplOptions::two_step(),
        )
        .unwrap();
        for (a, b) in res.theta_hat.to_vec().iter().zip(th.to_vec()) {
            assert!((a - b).abs() < 0.25, "{a} vs {b}");
        }
        assert_eq!(res.iterations, 1);
    }

    #[test]
    fn gradient_small_at_truth_on_expectation_data() {
        // replace counts by their expectations under the truth
        let g = game(3, 3);
        let th = theta3();
        let s = g.structure();
        let sig = solved(&g, &th);
        let pi = crate::simulate::steady_state(s, &sig).unwrap();
        let p = crate::kernels::transition_matrix(
            &crate::equilibrium::aggregate_generator(s, &sig).unwrap(),
            1.0,
        )
        .unwrap();
        let counts = DMatrix::from_fn(24, 24, |k, l| 1e4 * pi[k] * p.get(k, l));
        let data = Sample::Discrete {
            counts: TransitionCounts {
                n_markets: 10_000,
                counts,
            },
            delta: 1.0,
        };
        let lin = PsiLinearization::new(s, g.payoff_design(), &sig).unwrap();
        let f = |x: &[f64]| -data.loglik_at(s, &lin.evaluate(x).unwrap()).unwrap();
        let grad = crate::optimize::numerical_gradient(&f, &th.to_vec(), 1e-6);
        assert!(grad.iter().all(|v| v.abs() < 1e-6), "{grad:?}");
    }

    #[test]
    fn single_agent_npl_converges_from_any_start() {
        let g = game(1, 5);
        let th = Theta {
            fc: vec![-1.9],
            rs: 1.0,
            rn: 0.0,
            ec: 1.0,
        };
        let sig = solved(&g, &th);
        let pay = g.payoffs(&th).unwrap();
        let panel = sample_discrete(
            g.structure(),
            &pay,
            &sig,
            &DiscreteSampling {
                markets: 3000,
                periods: 2,
                ..Default::default()
            },
            5,
        )
        .unwrap();
        let data = Sample::from_panel(&panel, 1.0).unwrap();
        // with one firm θ_RN has no effect and stays at its starting value
        for seed in 0..3 {
            let s0 = random_ccp(g.space(), seed).unwrap();
            let res = ctnpl(
                g.structure(),
                g.payoff_design(),
                &data,
                &s0,
                &NplOptions::default(),
            )
            .unwrap();
            assert!(res.converged, "seed {seed}");
            let back = psi_map(
                g.structure(),
                &g.payoffs(&res.theta_hat).unwrap(),
                &res.sigma_hat,
            )
            .unwrap();
            assert!(back.max_abs_diff(&res.sigma_hat) < 1e-5);
        }
    }

    #[test]
    fn npl_restarts_reach_the_same_fixed_point() {
        let g = game(3, 3);
        let th = theta3();
        let sig = solved(&g, &th);
        let pay = g.payoffs(&th).unwrap();
        let panel = sample_discrete(
            g.structure(),
            &pay,
            &sig,
            &DiscreteSampling {
                markets: 2000,
                periods: 1,
                ..Default::default()
            },
            9,
        )
        .unwrap();
        let data = Sample::from_panel(&panel, 1.0).unwrap();
        let mut fits = Vec::new();
        for m in [InitMethod::Frequency, InitMethod::Logit, InitMethod::Random] {
            let s0 = init_ccp(m, g.space(), 1.0, Some(&data), None, 7).unwrap();
            let res = ctnpl(
                g.structure(),
                g.payoff_design(),
                &data,
                &s0,
                &NplOptions::default(),
            )
            .unwrap();
            assert!(res.converged, "{m:?}");
            fits.push(res);
        }
        for w in fits.windows(2) {
            assert!(w[0].sigma_hat.max_abs_diff(&w[1].sigma_hat) < 1e-4);
        }
        let mut shuffled = panel.clone();
        shuffled.markets.reverse();
        let d2 = Sample::from_panel(&shuffled, 1.0).unwrap();
        let again = ctnpl(
            g.structure(),
            g.payoff_design(),
            &d2,
            &sig,
            &NplOptions::two_step(),
        )
        .unwrap();
        let first = ctnpl(
            g.structure(),
            g.payoff_design(),
            &data,
            &sig,
            &NplOptions::two_step(),
        )
        .unwrap();
        for (a, b) in again
            .theta_hat
            .to_vec()
            .iter()
            .zip(first.theta_hat.to_vec())
        {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn stage_cap_enforced() {
        let g = game(1, 1);
        let data = Sample::from_panel(&Panel::new(2, vec![vec![0, 1]]).unwrap(), 1.0).unwrap();
        let opts = NplOptions {
            max_stages: 101,
            ..Default::default()
        };
        assert!(ctnpl(
            g.structure(),
            g.payoff_design(),
            &data,
            &CcpVector::uniform(1, 2, 2),
            &opts
        )
        .is_err());
    }

    #[test]
    fn rmse_relative_examples() {
        let truth = vec![1.0, 2.0];
        let mut r = BTreeMap::new();
        r.insert("base".to_string(), vec![vec![1.5, 2.5], vec![0.5, 1.0]]);
        r.insert("exact".to_string(), vec![truth.clone(), truth.clone()]);
        let out = rmse_relative(&r, "base", &truth).unwrap();
        assert_eq!(out["base"], vec![1.0, 1.0]);
        assert_eq!(out["exact"], vec![0.0, 0.0]);
        assert!(rmse_relative(&r, "missing", &truth).is_err());
    }
}
