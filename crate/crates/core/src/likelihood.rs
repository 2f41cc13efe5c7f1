//! Pseudo log-likelihoods for continuously observed event data and for
//! snapshot panels.
//!
//! Both evaluate the model at the best response `σ̃ = Ψ(θ, σ)` rather than
//! at `σ` itself, which is what makes them functions of θ for fixed σ.
//! Data enter only through sufficient statistics (time at risk and event
//! counts per state, or transition counts), so evaluation cost does not
//! grow with the number of markets.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::equilibrium::{aggregate_generator, psi_map, CcpVector, GameStructure, Payoffs};
use crate::error::{invalid, Result};
use crate::kernels::{transition_matrix, uniformization_matrix};
use crate::simulate::{EventKind, EventLog, Panel};

/// Probabilities below this are floored inside logs.
pub const PROB_FLOOR: f64 = 1e-300;

/// One competing hazard out of a state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HazardChannel {
    pub kind: EventKind,
    pub rate: f64,
    pub target: usize,
}

/// Per-state hazards: nature's `q_kl` and the players' `λσ_ijk` for every
/// state-changing choice.
#[derive(Debug, Clone, PartialEq)]
pub struct HazardProfile {
    channels: Vec<Vec<HazardChannel>>,
    total: Vec<f64>,
}

impl HazardProfile {
    pub fn new(s: &GameStructure, sigma: &CcpVector) -> Result<Self> {
        let kn = s.n_states();
        if sigma.n_states() != kn
            || sigma.n_players() != s.n_players()
            || sigma.n_choices() != s.n_choices()
        {
            return invalid("CCP shape does not match the game");
        }
        let q0 = s.nature().matrix();
        let mut channels = Vec::with_capacity(kn);
        for k in 0..kn {
            let mut row = Vec::new();
            for l in 0..kn {
                if l != k && q0[(k, l)] > 0.0 {
                    row.push(HazardChannel {
                        kind: EventKind::Nature { to: l },
                        rate: q0[(k, l)],
                        target: l,
                    });
                }
            }
            for i in 0..s.n_players() {
                for j in 1..s.n_choices() {
                    let l = s.continuation(i, j, k);
                    if l != k {
                        row.push(HazardChannel {
                            kind: EventKind::Player {
                                player: i,
                                choice: j,
                            },
                            rate: s.lambda() * sigma.get(i, j, k),
                            target: l,
                        });
                    }
                }
            }
            channels.push(row);
        }
        Self::from_channels(channels)
    }

    pub fn from_channels(channels: Vec<Vec<HazardChannel>>) -> Result<Self> {
        let kn = channels.len();
        for (k, row) in channels.iter().enumerate() {
            for ch in row {
                if !(ch.rate >= 0.0 && ch.rate.is_finite()) {
                    return invalid(format!(
                        "hazard {:?} out of state {k} is {}",
                        ch.kind, ch.rate
                    ));
                }
                if ch.target >= kn || ch.target == k {
                    return invalid(format!(
                        "hazard {:?} out of state {k} has bad target {}",
                        ch.kind, ch.target
                    ));
                }
            }
        }
        let total = channels
            .iter()
            .map(|r| r.iter().map(|c| c.rate).sum())
            .collect();
        Ok(Self { channels, total })
    }

    pub fn n_states(&self) -> usize {
        self.channels.len()
    }

    pub fn total(&self, k: usize) -> f64 {
        self.total[k]
    }

    pub fn channels(&self, k: usize) -> &[HazardChannel] {
        &self.channels[k]
    }

    /// Rate of events of type `kind` out of `k` (0 if impossible).
    pub fn rate(&self, k: usize, kind: EventKind) -> f64 {
        self.channels[k]
            .iter()
            .find(|c| c.kind == kind)
            .map_or(0.0, |c| c.rate)
    }
}

/// Time at risk and event counts per state.
#[derive(Debug, Clone, PartialEq)]
pub struct EventSummary {
    pub n_markets: usize,
    pub time_in_state: Vec<f64>,
    pub counts: BTreeMap<(usize, EventKind), usize>,
}

impl EventSummary {
    pub fn from_log(log: &EventLog) -> Result<Self> {
        log.validate()?;
        let mut time = vec![0.0; log.n_states];
        let mut counts = BTreeMap::new();
        for m in &log.markets {
            let mut t = 0.0;
            for e in &m.events {
                time[e.pre_state] += e.time - t;
                *counts.entry((e.pre_state, e.kind)).or_insert(0) += 1;
                t = e.time;
            }
            time[m.final_state()] += m.horizon - t;
        }
        Ok(Self {
            n_markets: log.n_markets(),
            time_in_state: time,
            counts,
        })
    }
}

/// Continuous-data log-likelihood split into its additive parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuousLoglik {
    /// `(player + nature + survival) / M`.
    pub total: f64,
    /// Σ ln(λσ̃) over player events.
    pub player: f64,
    /// Σ ln q over nature events.
    pub nature: f64,
    /// −Σ τ·H(k) over all spells, censored ones included.
    pub survival: f64,
    /// Events whose hazard is zero under the model; `total` is −∞ if any.
    pub impossible_events: usize,
}

/// Log-likelihood of summarized event data under fixed hazards.
pub fn loglik_events(hazards: &HazardProfile, data: &EventSummary) -> Result<ContinuousLoglik> {
    if hazards.n_states() != data.time_in_state.len() {
        return invalid("hazard profile and data disagree on the number of states");
    }
    let survival: f64 = -(0..hazards.n_states())
        .map(|k| data.time_in_state[k] * hazards.total(k))
        .sum::<f64>();
    let (mut player, mut nature, mut impossible) = (0.0, 0.0, 0);
    for (&(k, kind), &n) in &data.counts {
        let rate = hazards.rate(k, kind);
        if rate <= 0.0 {
            impossible += n;
            continue;
        }
        let term = n as f64 * rate.ln();
        match kind {
            EventKind::Nature { .. } => nature += term,
            EventKind::Player { .. } => player += term,
        }
    }
    let total = if impossible > 0 {
        f64::NEG_INFINITY
    } else if data.n_markets == 0 {
        0.0
    } else {
        (player + nature + survival) / data.n_markets as f64
    };
    Ok(ContinuousLoglik {
        total,
        player,
        nature,
        survival,
        impossible_events: impossible,
    })
}

/// Continuous-data log-likelihood at `σ̃` (already a best response).
pub fn loglik_continuous_at(
    s: &GameStructure,
    sigma_tilde: &CcpVector,
    data: &EventSummary,
) -> Result<ContinuousLoglik> {
    loglik_events(&HazardProfile::new(s, sigma_tilde)?, data)
}

/// `L(θ, σ)` for event data, with nature's rates held at their known values.
pub fn loglik_continuous(
    s: &GameStructure,
    payoffs: &Payoffs,
    sigma: &CcpVector,
    log: &EventLog,
) -> Result<ContinuousLoglik> {
    let tilde = psi_map(s, payoffs, sigma)?;
    loglik_continuous_at(s, &tilde, &EventSummary::from_log(log)?)
}

/// Transition counts `N_kl` of a panel.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionCounts {
    pub n_markets: usize,
    pub counts: DMatrix<f64>,
}

impl TransitionCounts {
    pub fn from_panel(panel: &Panel) -> Result<Self> {
        panel.validate()?;
        let mut counts = DMatrix::zeros(panel.n_states, panel.n_states);
        for (a, b) in panel.transitions() {
            counts[(a, b)] += 1.0;
        }
        Ok(Self {
            n_markets: panel.n_markets(),
            counts,
        })
    }
}

/// Discrete-data log-likelihood with the number of floored probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscreteLoglik {
    pub total: f64,
    /// Observed transitions whose model probability fell below the floor.
    pub floored: usize,
}

/// `Σ N_kl ln P_kl / M` for a given transition matrix.
pub fn loglik_transitions(p: &DMatrix<f64>, data: &TransitionCounts) -> Result<DiscreteLoglik> {
    if p.shape() != data.counts.shape() {
        return invalid("transition matrix and counts disagree in shape");
    }
    let mut total = 0.0;
    let mut floored = 0;
    for k in 0..p.nrows() {
        for l in 0..p.ncols() {
            let n = data.counts[(k, l)];
            if n == 0.0 {
                continue;
            }
            let mut v = p[(k, l)];
            if !(v >= PROB_FLOOR) {
                floored += n as usize;
                v = PROB_FLOOR;
            }
            total += n * v.ln();
        }
    }
    if data.n_markets > 0 {
        total /= data.n_markets as f64;
    }
    if floored > 0 {
        log::debug!("{floored} transitions hit the probability floor");
    }
    Ok(DiscreteLoglik { total, floored })
}

/// Discrete-data log-likelihood at `σ̃` (already a best response).
pub fn loglik_discrete_at(
    s: &GameStructure,
    sigma_tilde: &CcpVector,
    data: &TransitionCounts,
    delta: f64,
) -> Result<DiscreteLoglik> {
    let p = transition_matrix(&aggregate_generator(s, sigma_tilde)?, delta)?;
    loglik_transitions(p.matrix(), data)
}

/// `L(θ, σ) = (1/M) Σ ln P_{k_{n−1} k_n}(Δ; Ψ(θ, σ))`.
pub fn loglik_discrete(
    s: &GameStructure,
    payoffs: &Payoffs,
    sigma: &CcpVector,
    panel: &Panel,
    delta: f64,
) -> Result<DiscreteLoglik> {
    let tilde = psi_map(s, payoffs, sigma)?;
    loglik_discrete_at(s, &tilde, &TransitionCounts::from_panel(panel)?, delta)
}

/// Same as [`loglik_discrete`] with `P(Δ)` from the uniformization series.
pub fn loglik_discrete_uniformized(
    s: &GameStructure,
    payoffs: &Payoffs,
    sigma: &CcpVector,
    panel: &Panel,
    delta: f64,
    truncation_tol: f64,
) -> Result<DiscreteLoglik> {
    let tilde = psi_map(s, payoffs, sigma)?;
    let p = uniformization_matrix(&aggregate_generator(s, &tilde)?, delta, truncation_tol)?;
    loglik_transitions(&p, &TransitionCounts::from_panel(panel)?)
}
