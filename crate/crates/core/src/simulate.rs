//! Continuous-time event simulation and snapshot sampling from a solved
//! equilibrium, plus the descriptive statistics of the resulting panels.
//!
//! Every market draws from its own ChaCha stream (`seed`, stream = market
//! id), so markets run in parallel and results do not depend on the thread
//! count.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::equilibrium::{
    aggregate_generator, fixed_point_residual, CcpVector, GameStructure, Payoffs,
};
use crate::error::{invalid, Error, Result};
use crate::kernels::{stationary_distribution, transition_matrix};
use crate::likelihood::HazardProfile;
use crate::state_model::StateSpace;

/// Largest fixed-point residual accepted as "an equilibrium" by the simulators.
pub const EQUILIBRIUM_CHECK_TOL: f64 = 1e-6;

/// What moved the state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventKind {
    Nature { to: usize },
    Player { player: usize, choice: usize },
}

/// One observed state change.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    /// State just before the event.
    pub pre_state: usize,
    /// State just after the event.
    pub post_state: usize,
    /// Absolute event time.
    pub time: f64,
    pub kind: EventKind,
}

/// Events of one market observed on `[0, horizon]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketPath {
    pub initial_state: usize,
    pub horizon: f64,
    pub events: Vec<Event>,
}

impl MarketPath {
    pub fn final_state(&self) -> usize {
        self.events
            .last()
            .map_or(self.initial_state, |e| e.post_state)
    }

    /// State occupied at time `t`.
    pub fn state_at(&self, t: f64) -> usize {
        let idx = self.events.partition_point(|e| e.time <= t);
        if idx == 0 {
            self.initial_state
        } else {
            self.events[idx - 1].post_state
        }
    }
}

/// Continuous-time data set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventLog {
    pub n_states: usize,
    pub markets: Vec<MarketPath>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EventRecord {
    market_id: usize,
    n: usize,
    k: usize,
    t: f64,
    actor: i64,
    action: i64,
}

impl EventLog {
    pub fn n_markets(&self) -> usize {
        self.markets.len()
    }

    pub fn n_events(&self) -> usize {
        self.markets.iter().map(|m| m.events.len()).sum()
    }

    /// Checks time ordering, state ranges and pre/post chaining.
    pub fn validate(&self) -> Result<()> {
        for (m, path) in self.markets.iter().enumerate() {
            if path.initial_state >= self.n_states {
                return invalid(format!("market {m}: initial state out of range"));
            }
            if !(path.horizon >= 0.0) {
                return invalid(format!("market {m}: negative horizon"));
            }
            let mut k = path.initial_state;
            let mut t = 0.0;
            for (n, e) in path.events.iter().enumerate() {
                if e.pre_state != k {
                    return invalid(format!(
                        "market {m}, event {n}: pre-state {} but chain is in {k}",
                        e.pre_state
                    ));
                }
                if e.post_state >= self.n_states {
                    return invalid(format!("market {m}, event {n}: post-state out of range"));
                }
                if !(e.time > t || (n == 0 && e.time >= 0.0)) || e.time > path.horizon {
                    return invalid(format!(
                        "market {m}, event {n}: time {} out of order",
                        e.time
                    ));
                }
                t = e.time;
                k = e.post_state;
            }
        }
        Ok(())
    }

    /// Snapshots every market at `0, Δ, 2Δ, …` up to its horizon (at most
    /// `periods + 1` observations).
    pub fn snapshot(&self, delta: f64, periods: usize) -> Result<Panel> {
        if !(delta > 0.0) {
            return invalid("snapshot interval must be positive");
        }
        let markets = self
            .markets
            .iter()
            .map(|p| {
                (0..=periods)
                    .map(|n| n as f64 * delta)
                    .take_while(|&t| t <= p.horizon * (1.0 + 1e-12))
                    .map(|t| p.state_at(t))
                    .collect()
            })
            .collect();
        Ok(Panel {
            n_states: self.n_states,
            markets,
        })
    }

    /// CSV columns `market_id,n,k,t,actor,action`. `k` is the pre-state;
    /// `actor` is 0 for nature (action = target state), `i + 1` for player
    /// `i` (action = choice) and −1 for the closing censoring row, whose `k`
    /// is the final state and `t` the horizon.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for (m, p) in self.markets.iter().enumerate() {
            for (n, e) in p.events.iter().enumerate() {
                let (actor, action) = match e.kind {
                    EventKind::Nature { to } => (0, to as i64),
                    EventKind::Player { player, choice } => (player as i64 + 1, choice as i64),
                };
                w.serialize(EventRecord {
                    market_id: m,
                    n,
                    k: e.pre_state,
                    t: e.time,
                    actor,
                    action,
                })?;
            }
            w.serialize(EventRecord {
                market_id: m,
                n: p.events.len(),
                k: p.final_state(),
                t: p.horizon,
                actor: -1,
                action: -1,
            })?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the format of [`EventLog::write_csv`]; player post-states are
    /// recomputed with `structure`.
    pub fn read_csv(path: impl AsRef<Path>, structure: &GameStructure) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut markets: Vec<MarketPath> = Vec::new();
        let mut pending: Vec<Event> = Vec::new();
        for rec in r.deserialize() {
            let rec: EventRecord = rec?;
            if rec.market_id != markets.len() {
                return invalid(format!(
                    "market ids must be consecutive from 0, found {}",
                    rec.market_id
                ));
            }
            if rec.n != pending.len() {
                return invalid(format!(
                    "market {}: event index {} out of sequence",
                    rec.market_id, rec.n
                ));
            }
            if rec.k >= structure.n_states() {
                return invalid(format!("state {} out of range", rec.k));
            }
            match rec.actor {
                -1 => {
                    let initial_state = pending.first().map_or(rec.k, |e| e.pre_state);
                    let path = MarketPath {
                        initial_state,
                        horizon: rec.t,
                        events: std::mem::take(&mut pending),
                    };
                    if path.final_state() != rec.k {
                        return invalid(format!(
                            "market {}: censoring state disagrees with events",
                            rec.market_id
                        ));
                    }
                    markets.push(path);
                }
                0 => {
                    let to = usize::try_from(rec.action)
                        .map_err(|_| Error::InvalidArgument("bad nature target".into()))?;
                    pending.push(Event {
                        pre_state: rec.k,
                        post_state: to,
                        time: rec.t,
                        kind: EventKind::Nature { to },
                    });
                }
                a if a > 0 && (a as usize) <= structure.n_players() => {
                    let player = a as usize - 1;
                    let choice = usize::try_from(rec.action)
                        .ok()
                        .filter(|&j| j < structure.n_choices())
                        .ok_or_else(|| {
                            Error::InvalidArgument(format!("bad choice {}", rec.action))
                        })?;
                    pending.push(Event {
                        pre_state: rec.k,
                        post_state: structure.continuation(player, choice, rec.k),
                        time: rec.t,
                        kind: EventKind::Player { player, choice },
                    });
                }
                a => return invalid(format!("unknown actor {a}")),
            }
        }
        if !pending.is_empty() {
            return invalid("last market has no censoring row");
        }
        let log = EventLog {
            n_states: structure.n_states(),
            markets,
        };
        log.validate()?;
        Ok(log)
    }
}

/// Snapshot data: states of each market on the lattice `{nΔ}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Panel {
    pub n_states: usize,
    pub markets: Vec<Vec<usize>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PanelRecord {
    market_id: usize,
    n: usize,
    k: usize,
}

impl Panel {
    pub fn new(n_states: usize, markets: Vec<Vec<usize>>) -> Result<Self> {
        let p = Self { n_states, markets };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.markets.iter().flatten().any(|&k| k >= self.n_states) {
            return invalid("panel contains a state index out of range");
        }
        Ok(())
    }

    pub fn n_markets(&self) -> usize {
        self.markets.len()
    }

    pub fn n_transitions(&self) -> usize {
        self.markets.iter().map(|m| m.len().saturating_sub(1)).sum()
    }

    /// Consecutive `(from, to)` pairs over all markets.
    pub fn transitions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.markets
            .iter()
            .flat_map(|m| m.windows(2).map(|w| (w[0], w[1])))
    }

    /// CSV columns `market_id,n,k`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for (m, states) in self.markets.iter().enumerate() {
            for (n, &k) in states.iter().enumerate() {
                w.serialize(PanelRecord { market_id: m, n, k })?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>, n_states: usize) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut markets: Vec<Vec<usize>> = Vec::new();
        for rec in r.deserialize() {
            let rec: PanelRecord = rec?;
            if rec.market_id == markets.len() && rec.n == 0 {
                markets.push(Vec::new());
            }
            let current = markets.len();
            match markets.last_mut() {
                Some(m) if rec.market_id + 1 == current && rec.n == m.len() => m.push(rec.k),
                _ => {
                    return invalid(format!(
                        "panel rows out of order at market {} period {}",
                        rec.market_id, rec.n
                    ))
                }
            }
        }
        Self::new(n_states, markets)
    }
}

/// How the first state of every market is drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitialStates {
    /// Steady state of `Q(θ, σ*)`.
    #[default]
    Stationary,
    Fixed(usize),
}

/// Settings for [`simulate_continuous`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousSampling {
    pub markets: usize,
    /// Censoring time T̄; may be infinite when `max_events` is set.
    pub horizon: f64,
    /// Stop a market after this many events (its horizon becomes the time
    /// of the last event).
    pub max_events: Option<usize>,
    #[serde(default)]
    pub initial: InitialStates,
}

impl Default for ContinuousSampling {
    fn default() -> Self {
        Self {
            markets: 400,
            horizon: f64::INFINITY,
            max_events: Some(1),
            initial: InitialStates::Stationary,
        }
    }
}

/// Settings for [`sample_discrete`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteSampling {
    pub markets: usize,
    /// Transitions per market; each market has `periods + 1` snapshots.
    pub periods: usize,
    pub delta: f64,
    #[serde(default)]
    pub initial: InitialStates,
}

impl Default for DiscreteSampling {
    fn default() -> Self {
        Self {
            markets: 400,
            periods: 1,
            delta: 1.0,
            initial: InitialStates::Stationary,
        }
    }
}

fn check_equilibrium(s: &GameStructure, payoffs: &Payoffs, sigma: &CcpVector) -> Result<()> {
    let r = fixed_point_residual(s, payoffs, sigma)?;
    if r > EQUILIBRIUM_CHECK_TOL {
        return invalid(format!(
            "sigma is not an equilibrium (fixed-point residual {r:.3e})"
        ));
    }
    Ok(())
}

fn initial_sampler(
    s: &GameStructure,
    sigma: &CcpVector,
    initial: &InitialStates,
) -> Result<Option<WeightedIndex<f64>>> {
    match *initial {
        InitialStates::Stationary => {
            let pi = stationary_distribution(&aggregate_generator(s, sigma)?)?;
            Ok(Some(
                WeightedIndex::new(pi.iter().copied())
                    .map_err(|e| Error::Numeric(e.to_string()))?,
            ))
        }
        InitialStates::Fixed(k) if k < s.n_states() => Ok(None),
        InitialStates::Fixed(k) => invalid(format!("initial state {k} out of range")),
    }
}

pub(crate) fn market_rng(seed: u64, market: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(market as u64);
    rng
}

/// Simulates continuous-time data from `σ*`. Decision epochs where the
/// player keeps the state are not recorded.
pub fn simulate_continuous(
    s: &GameStructure,
    payoffs: &Payoffs,
    sigma: &CcpVector,
    opts: &ContinuousSampling,
    seed: u64,
) -> Result<EventLog> {
    check_equilibrium(s, payoffs, sigma)?;
    let hazards = HazardProfile::new(s, sigma)?;
    let init = initial_sampler(s, sigma, &opts.initial)?;
    let fixed = match opts.initial {
        InitialStates::Fixed(k) => k,
        InitialStates::Stationary => 0,
    };
    simulate_hazards(
        &hazards,
        |rng| init.as_ref().map_or(fixed, |w| w.sample(rng)),
        opts,
        seed,
    )
}

/// Competing-hazards simulation on a given hazard profile.
pub fn simulate_hazards(
    hazards: &HazardProfile,
    initial: impl Fn(&mut ChaCha8Rng) -> usize + Sync,
    opts: &ContinuousSampling,
    seed: u64,
) -> Result<EventLog> {
    if !(opts.horizon >= 0.0) {
        return invalid("horizon must be non-negative");
    }
    if opts.horizon.is_infinite() && opts.max_events.is_none() {
        return invalid("an infinite horizon needs max_events");
    }
    let markets = (0..opts.markets)
        .into_par_iter()
        .map(|m| {
            let mut rng = market_rng(seed, m);
            let k0 = initial(&mut rng);
            simulate_market(hazards, k0, opts, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EventLog {
        n_states: hazards.n_states(),
        markets,
    })
}

fn simulate_market(
    hazards: &HazardProfile,
    k0: usize,
    opts: &ContinuousSampling,
    rng: &mut ChaCha8Rng,
) -> Result<MarketPath> {
    let mut k = k0;
    let mut t = 0.0;
    let mut events = Vec::new();
    let cap = opts.max_events.unwrap_or(usize::MAX);
    if cap == 0 {
        return Ok(MarketPath {
            initial_state: k0,
            horizon: 0.0,
            events,
        });
    }
    loop {
        let h = hazards.total(k);
        if h <= 0.0 {
            if opts.horizon.is_infinite() {
                return Err(Error::Numeric(format!(
                    "state {k} is absorbing and the horizon is unbounded"
                )));
            }
            break;
        }
        let tau: f64 = rng.sample::<f64, _>(Exp1) / h;
        if t + tau > opts.horizon {
            break;
        }
        t += tau;
        let mut u = rng.random::<f64>() * h;
        let channels = hazards.channels(k);
        let mut pick = channels.len() - 1;
        for (c, ch) in channels.iter().enumerate() {
            if u < ch.rate {
                pick = c;
                break;
            }
            u -= ch.rate;
        }
        let ch = channels[pick];
        events.push(Event {
            pre_state: k,
            post_state: ch.target,
            time: t,
            kind: ch.kind,
        });
        k = ch.target;
        if events.len() >= cap {
            return Ok(MarketPath {
                initial_state: k0,
                horizon: t,
                events,
            });
        }
    }
    Ok(MarketPath {
        initial_state: k0,
        horizon: opts.horizon,
        events,
    })
}

/// Draws snapshot data: `k_{n+1}` from row `k_n` of `P(Δ) = exp(Δ Q(θ, σ*))`.
pub fn sample_discrete(
    s: &GameStructure,
    payoffs: &Payoffs,
    sigma: &CcpVector,
    opts: &DiscreteSampling,
    seed: u64,
) -> Result<Panel> {
    check_equilibrium(s, payoffs, sigma)?;
    let q = aggregate_generator(s, sigma)?;
    let p = transition_matrix(&q, opts.delta)?;
    let init = initial_sampler(s, sigma, &opts.initial)?;
    let fixed = match opts.initial {
        InitialStates::Fixed(k) => k,
        InitialStates::Stationary => 0,
    };
    sample_chain(
        p.matrix(),
        |rng| init.as_ref().map_or(fixed, |w| w.sample(rng)),
        opts,
        seed,
    )
}

/// Samples paths of a discrete-time chain with transition matrix `p`.
pub fn sample_chain(
    p: &DMatrix<f64>,
    initial: impl Fn(&mut ChaCha8Rng) -> usize + Sync,
    opts: &DiscreteSampling,
    seed: u64,
) -> Result<Panel> {
    let rows = (0..p.nrows())
        .map(|r| {
            WeightedIndex::new(p.row(r).iter().copied())
                .map_err(|e| Error::Numeric(format!("row {r}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let markets = (0..opts.markets)
        .into_par_iter()
        .map(|m| {
            let mut rng = market_rng(seed, m);
            let mut k = initial(&mut rng);
            let mut path = Vec::with_capacity(opts.periods + 1);
            path.push(k);
            for _ in 0..opts.periods {
                k = rows[k].sample(&mut rng);
                path.push(k);
            }
            path
        })
        .collect();
    Panel::new(p.nrows(), markets)
}

/// Steady-state distribution implied by `σ`.
pub fn steady_state(s: &GameStructure, sigma: &CcpVector) -> Result<DVector<f64>> {
    stationary_distribution(&aggregate_generator(s, sigma)?)
}

/// Summary statistics of an entry/exit panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptiveStats {
    pub avg_active: f64,
    pub sd_active: f64,
    /// OLS slope of active count on its lag (with intercept); `None` when
    /// the lagged count has no variance.
    pub ar1: Option<f64>,
    pub avg_entrants: f64,
    pub avg_exits: f64,
    pub excess_turnover: f64,
    /// `None` when either count has no variance.
    pub entry_exit_corr: Option<f64>,
    pub firm_activity: Vec<f64>,
}

fn entries_exits(space: &StateSpace, k: usize, l: usize) -> (f64, f64) {
    let mask = (1usize << space.n_players()) - 1;
    let (a, b) = (k & mask, l & mask);
    ((!a & b).count_ones() as f64, (a & !b).count_ones() as f64)
}

/// Sample statistics over all snapshots (levels) and all consecutive pairs
/// (changes).
pub fn descriptive_stats(panel: &Panel, space: &StateSpace) -> Result<DescriptiveStats> {
    let obs = panel.markets.iter().map(Vec::len).sum::<usize>();
    if obs == 0 {
        return invalid("panel is empty");
    }
    if panel.n_transitions() == 0 {
        return invalid("panel needs at least one market with two periods");
    }
    if panel.n_states != space.n_states() {
        return invalid("panel and state space disagree on the number of states");
    }
    let n = space.n_players();
    let mut firm = vec![0.0; n];
    let (mut s1, mut s2) = (0.0, 0.0);
    for &k in panel.markets.iter().flatten() {
        let a = space.active_count(k) as f64;
        s1 += a;
        s2 += a * a;
        for (i, f) in firm.iter_mut().enumerate() {
            if space.is_active(i, k) {
                *f += 1.0;
            }
        }
    }
    let nobs = obs as f64;
    let avg = s1 / nobs;
    let sd = (s2 / nobs - avg * avg).max(0.0).sqrt();

    let m = panel.n_transitions() as f64;
    let (mut x, mut y, mut xx, mut xy) = (0.0, 0.0, 0.0, 0.0);
    let (mut en, mut ex, mut ee, mut en2, mut ex2, mut turn) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for (k, l) in panel.transitions() {
        let (a, b) = (space.active_count(k) as f64, space.active_count(l) as f64);
        x += a;
        y += b;
        xx += a * a;
        xy += a * b;
        let (e, q) = entries_exits(space, k, l);
        en += e;
        ex += q;
        ee += e * q;
        en2 += e * e;
        ex2 += q * q;
        turn += (e + q) - (e - q).abs();
    }
    let var_x = xx / m - (x / m).powi(2);
    let cov_xy = xy / m - (x / m) * (y / m);
    let ar1 = (var_x > 1e-14).then(|| cov_xy / var_x);
    let (me, mx) = (en / m, ex / m);
    let (ve, vx) = (en2 / m - me * me, ex2 / m - mx * mx);
    let corr = (ve > 1e-14 && vx > 1e-14).then(|| (ee / m - me * mx) / (ve * vx).sqrt());
    Ok(DescriptiveStats {
        avg_active: avg,
        sd_active: sd,
        ar1,
        avg_entrants: me,
        avg_exits: mx,
        excess_turnover: turn / m,
        entry_exit_corr: corr,
        firm_activity: firm.into_iter().map(|f| f / nobs).collect(),
    })
}

/// Population counterpart of [`descriptive_stats`] for a stationary chain:
/// levels under `π`, changes under `π_k P_kl`.
pub fn stationary_stats(
    space: &StateSpace,
    pi: &DVector<f64>,
    p: &DMatrix<f64>,
) -> Result<DescriptiveStats> {
    let kn = space.n_states();
    if pi.len() != kn || p.nrows() != kn || p.ncols() != kn {
        return invalid("dimensions of pi and P must match the state space");
    }
    let n = space.n_players();
    let act: Vec<f64> = (0..kn).map(|k| space.active_count(k) as f64).collect();
    let avg: f64 = (0..kn).map(|k| pi[k] * act[k]).sum();
    let var: f64 = (0..kn).map(|k| pi[k] * (act[k] - avg).powi(2)).sum();
    let firm = (0..n)
        .map(|i| {
            (0..kn)
                .filter(|&k| space.is_active(i, k))
                .map(|k| pi[k])
                .sum()
        })
        .collect();
    let (mut cov, mut en, mut ex, mut ee, mut en2, mut ex2, mut turn) =
        (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    // next-period mean equals avg because π is stationary
    for k in 0..kn {
        for l in 0..kn {
            let w = pi[k] * p[(k, l)];
            if w == 0.0 {
                continue;
            }
            cov += w * (act[k] - avg) * (act[l] - avg);
            let (e, q) = entries_exits(space, k, l);
            en += w * e;
            ex += w * q;
            ee += w * e * q;
            en2 += w * e * e;
            ex2 += w * q * q;
            turn += w * ((e + q) - (e - q).abs());
        }
    }
    let (ve, vx) = (en2 - en * en, ex2 - ex * ex);
    Ok(DescriptiveStats {
        avg_active: avg,
        sd_active: var.sqrt(),
        ar1: (var > 1e-14).then(|| cov / var),
        avg_entrants: en,
        avg_exits: ex,
        excess_turnover: turn,
        entry_exit_corr: (ve > 1e-14 && vx > 1e-14).then(|| (ee - en * ex) / (ve * vx).sqrt()),
        firm_activity: firm,
    })
}
