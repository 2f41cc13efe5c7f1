//! State space, payoff primitives and nature's intensity matrix for the
//! N-firm entry/exit game.
//!
//! A state is a demand level `d ∈ {1, …, L}` together with one activity bit
//! per firm. States are indexed demand-major with the activity bitmask in
//! the low bits: `k = (d − 1)·2^N + Σ_i a_i 2^i`, so nature's generator is
//! block-banded.
//!
//! The demand level itself is used as the log market size in the profit
//! function. Inactive firms earn no flow profit; an active firm earns
//! `θ_RS·d − θ_RN·ln(1 + active rivals) + θ_FC,i`, with fixed costs
//! expressed as (typically negative) profit shifters.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::equilibrium::{GameStructure, PayoffDesign, Payoffs};
use crate::error::{invalid, Result};
use crate::kernels::{expm, Generator};

/// Structural constants of the game. Rates are per unit of time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameConfig {
    pub n_players: usize,
    #[serde(default = "default_choices")]
    pub n_choices: usize,
    pub market_levels: usize,
    pub lambda: f64,
    pub rho: f64,
    pub q_up: f64,
    pub q_down: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
}

fn default_choices() -> usize {
    2
}

fn default_delta() -> f64 {
    1.0
}

impl GameConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_players == 0 {
            return invalid("n_players must be at least 1");
        }
        if self.n_players > 12 {
            return invalid("n_players above 12 gives an impractically large state space");
        }
        if self.n_choices != 2 {
            return invalid(format!(
                "the entry/exit game has 2 choices, got {}",
                self.n_choices
            ));
        }
        if self.market_levels == 0 {
            return invalid("market_levels must be at least 1");
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return invalid(format!(
                "lambda must be positive and finite, got {}",
                self.lambda
            ));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return invalid(format!("rho must be positive and finite, got {}", self.rho));
        }
        if !(self.q_up >= 0.0
            && self.q_up.is_finite()
            && self.q_down >= 0.0
            && self.q_down.is_finite())
        {
            return invalid("nature rates must be non-negative and finite");
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return invalid(format!("delta must be positive, got {}", self.delta));
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.market_levels << self.n_players
    }
}

/// Payoff parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    /// Per-firm fixed-cost shifters θ_FC,i.
    pub fc: Vec<f64>,
    /// Market-size effect θ_RS.
    pub rs: f64,
    /// Competition effect θ_RN.
    pub rn: f64,
    /// Entry cost θ_EC.
    pub ec: f64,
}

impl Theta {
    pub fn validate(&self, n_players: usize) -> Result<()> {
        if self.fc.len() != n_players {
            return invalid(format!(
                "expected {} fixed costs, got {}",
                n_players,
                self.fc.len()
            ));
        }
        if self.to_vec().iter().any(|v| !v.is_finite()) {
            return invalid("theta entries must be finite");
        }
        Ok(())
    }

    /// Number of free parameters for `n_players` firms.
    pub fn dim(n_players: usize) -> usize {
        n_players + 3
    }

    /// Flattened as `(θ_FC,1, …, θ_FC,N, θ_RS, θ_RN, θ_EC)`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.fc.clone();
        v.extend([self.rs, self.rn, self.ec]);
        v
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() < 4 {
            return invalid("theta vector needs at least 4 entries");
        }
        let n = v.len() - 3;
        Ok(Self {
            fc: v[..n].to_vec(),
            rs: v[n],
            rn: v[n + 1],
            ec: v[n + 2],
        })
    }

    /// Index of θ_RS, θ_RN and θ_EC in the flattened vector.
    pub fn rs_index(n_players: usize) -> usize {
        n_players
    }
    pub fn rn_index(n_players: usize) -> usize {
        n_players + 1
    }
    pub fn ec_index(n_players: usize) -> usize {
        n_players + 2
    }

    pub fn parameter_names(n_players: usize) -> Vec<String> {
        let mut names: Vec<String> = (1..=n_players).map(|i| format!("theta_fc_{i}")).collect();
        names.extend(["theta_rs".into(), "theta_rn".into(), "theta_ec".into()]);
        names
    }
}

/// Decoded view of a state index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateIndex {
    pub k: usize,
    pub demand_level: usize,
    pub activity: Vec<bool>,
}

/// Indexing of the product state space `{1..L} × {0,1}^N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateSpace {
    n_players: usize,
    market_levels: usize,
}

impl StateSpace {
    pub fn new(n_players: usize, market_levels: usize) -> Result<Self> {
        if n_players == 0 || market_levels == 0 {
            return invalid("state space needs at least one player and one demand level");
        }
        Ok(Self {
            n_players,
            market_levels,
        })
    }

    pub fn n_players(&self) -> usize {
        self.n_players
    }

    pub fn market_levels(&self) -> usize {
        self.market_levels
    }

    pub fn n_states(&self) -> usize {
        self.market_levels << self.n_players
    }

    pub fn encode(&self, demand_level: usize, activity: &[bool]) -> Result<usize> {
        if demand_level < 1 || demand_level > self.market_levels {
            return invalid(format!(
                "demand level {demand_level} outside 1..={}",
                self.market_levels
            ));
        }
        if activity.len() != self.n_players {
            return invalid(format!(
                "activity vector has length {}, expected {}",
                activity.len(),
                self.n_players
            ));
        }
        let mask = activity
            .iter()
            .enumerate()
            .fold(0usize, |m, (i, &a)| if a { m | (1 << i) } else { m });
        Ok(((demand_level - 1) << self.n_players) + mask)
    }

    pub fn decode(&self, k: usize) -> Result<StateIndex> {
        if k >= self.n_states() {
            return invalid(format!("state {k} outside 0..{}", self.n_states()));
        }
        Ok(StateIndex {
            k,
            demand_level: self.level(k),
            activity: (0..self.n_players).map(|i| self.is_active(i, k)).collect(),
        })
    }

    /// Demand level in `1..=L`.
    pub fn level(&self, k: usize) -> usize {
        (k >> self.n_players) + 1
    }

    pub fn is_active(&self, i: usize, k: usize) -> bool {
        (k >> i) & 1 == 1
    }

    pub fn active_count(&self, k: usize) -> usize {
        (k & ((1 << self.n_players) - 1)).count_ones() as usize
    }

    pub fn active_rivals(&self, i: usize, k: usize) -> usize {
        self.active_count(k) - usize::from(self.is_active(i, k))
    }

    /// `l(i, j, k)`: choice 0 keeps the state, choice 1 toggles firm i.
    pub fn continuation_state(&self, i: usize, j: usize, k: usize) -> Result<usize> {
        if i >= self.n_players || j > 1 || k >= self.n_states() {
            return invalid(format!("continuation_state({i}, {j}, {k}) out of range"));
        }
        Ok(if j == 0 { k } else { k ^ (1 << i) })
    }
}

/// Flow profit of firm `i` in state `k`.
pub fn flow_payoff(space: &StateSpace, theta: &Theta, i: usize, k: usize) -> f64 {
    if !space.is_active(i, k) {
        return 0.0;
    }
    let rivals = space.active_rivals(i, k) as f64;
    theta.rs * space.level(k) as f64 - theta.rn * (1.0 + rivals).ln() + theta.fc[i]
}

/// Lump-sum payoff of choice `j`: entering costs θ_EC, everything else is free.
pub fn instant_payoff(space: &StateSpace, theta: &Theta, i: usize, j: usize, k: usize) -> f64 {
    if j == 1 && !space.is_active(i, k) {
        -theta.ec
    } else {
        0.0
    }
}

/// Birth–death generator over demand levels.
pub fn demand_generator(levels: usize, q_up: f64, q_down: f64) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(levels, levels);
    for d in 0..levels {
        if d + 1 < levels {
            g[(d, d + 1)] = q_up;
        }
        if d > 0 {
            g[(d, d - 1)] = q_down;
        }
        let s: f64 = g.row(d).sum();
        g[(d, d)] = -s;
    }
    g
}

/// Nature's generator on the full state space: demand moves one level at
/// a time, activity bits are untouched.
pub fn nature_generator(config: &GameConfig) -> Result<Generator> {
    if config.q_up < 0.0 || config.q_down < 0.0 {
        return invalid("nature rates must be non-negative");
    }
    let space = StateSpace::new(config.n_players, config.market_levels)?;
    let k = space.n_states();
    let block = 1usize << config.n_players;
    let mut q = DMatrix::zeros(k, k);
    for s in 0..k {
        let d = space.level(s);
        if d < config.market_levels {
            q[(s, s + block)] = config.q_up;
        }
        if d > 1 {
            q[(s, s - block)] = config.q_down;
        }
    }
    Generator::from_rates(q)
}

/// Fitted constant birth–death rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NatureFit {
    pub q_up: f64,
    pub q_down: f64,
    /// Frobenius distance between `exp(Δ G)` and the target.
    pub residual: f64,
}

/// Least-squares fit of `(q_up, q_down)` so that `exp(Δ·G)` matches a
/// row-stochastic tridiagonal target.
///
/// A coarse grid over `[0, 2]²` seeds a compass search that shrinks its
/// step down to `1e-11`. Fully deterministic.
pub fn calibrate_nature_rates(target: &DMatrix<f64>, delta: f64) -> Result<NatureFit> {
    if !target.is_square() || target.nrows() == 0 {
        return invalid("target transition matrix must be square and non-empty");
    }
    if !(delta > 0.0) {
        return invalid("delta must be positive");
    }
    let l = target.nrows();
    for r in 0..l {
        let mut sum = 0.0;
        for c in 0..l {
            let v = target[(r, c)];
            if !(0.0..=1.0).contains(&v) {
                return invalid(format!("target entry ({r},{c}) = {v} is not a probability"));
            }
            if (r as isize - c as isize).abs() > 1 && v != 0.0 {
                return invalid("target must be tridiagonal");
            }
            sum += v;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return invalid(format!("target row {r} sums to {sum}"));
        }
    }

    let objective = |up: f64, down: f64| -> f64 {
        let p =
            expm(&(demand_generator(l, up, down) * delta)).expect("finite birth-death generator");
        (p - target).norm_squared()
    };

    let mut best = (0.0, 0.0, objective(0.0, 0.0));
    let steps = 40;
    for a in 0..=steps {
        for b in 0..=steps {
            let (up, down) = (2.0 * a as f64 / steps as f64, 2.0 * b as f64 / steps as f64);
            let f = objective(up, down);
            if f < best.2 {
                best = (up, down, f);
            }
        }
    }

    let (mut up, mut down, mut f) = best;
    let mut step = 2.0 / steps as f64;
    while step > 1e-11 {
        let mut improved = false;
        for (du, dd) in [
            (step, 0.0),
            (-step, 0.0),
            (0.0, step),
            (0.0, -step),
            (step, step),
            (-step, -step),
        ] {
            let (cu, cd) = ((up + du).max(0.0), (down + dd).max(0.0));
            let cf = objective(cu, cd);
            if cf < f {
                up = cu;
                down = cd;
                f = cf;
                improved = true;
                break;
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    Ok(NatureFit {
        q_up: up,
        q_down: down,
        residual: f.sqrt(),
    })
}

/// The transition matrix for market size used by the classic five-firm
/// discrete-time entry/exit experiments.
pub fn am07_market_transition() -> DMatrix<f64> {
    DMatrix::from_row_slice(
        5,
        5,
        &[
            0.8, 0.2, 0.0, 0.0, 0.0, //
            0.2, 0.6, 0.2, 0.0, 0.0, //
            0.0, 0.2, 0.6, 0.2, 0.0, //
            0.0, 0.0, 0.2, 0.6, 0.2, //
            0.0, 0.0, 0.0, 0.2, 0.8,
        ],
    )
}

/// The entry/exit game: state space, nature and payoff structure bundled.
#[derive(Debug, Clone)]
pub struct EntryExitGame {
    config: GameConfig,
    space: StateSpace,
    structure: GameStructure,
    design: PayoffDesign,
}

impl EntryExitGame {
    pub fn new(config: GameConfig) -> Result<Self> {
        config.validate()?;
        let space = StateSpace::new(config.n_players, config.market_levels)?;
        let nature = nature_generator(&config)?;
        let structure = build_structure(&config, &space, nature)?;
        let design = build_design(&space);
        Ok(Self {
            config,
            space,
            structure,
            design,
        })
    }

    pub fn structure(&self) -> &GameStructure {
        &self.structure
    }

    pub fn payoff_design(&self) -> &PayoffDesign {
        &self.design
    }

    pub fn payoffs(&self, theta: &Theta) -> Result<Payoffs> {
        theta.validate(self.config.n_players)?;
        self.design.evaluate(&theta.to_vec())
    }

    pub fn config(&self) -> &GameConfig {
        &self.config
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn nature(&self) -> &Generator {
        self.structure.nature()
    }

    pub fn n_states(&self) -> usize {
        self.space.n_states()
    }
}

fn build_structure(
    config: &GameConfig,
    space: &StateSpace,
    nature: Generator,
) -> Result<GameStructure> {
    let n = config.n_players;
    let k = space.n_states();
    let mut continuation = Vec::with_capacity(n * 2 * k);
    for i in 0..n {
        for j in 0..2 {
            for s in 0..k {
                continuation.push(if j == 0 { s } else { s ^ (1 << i) });
            }
        }
    }
    GameStructure::new(n, 2, k, config.lambda, config.rho, continuation, nature)
}

// Payoffs are linear in θ; the design holds the regressors.
fn build_design(space: &StateSpace) -> PayoffDesign {
    let n = space.n_players();
    let k = space.n_states();
    let p = Theta::dim(n);
    let mut flow = Vec::with_capacity(n);
    for i in 0..n {
        let mut z = DMatrix::zeros(k, p);
        for s in 0..k {
            if space.is_active(i, s) {
                z[(s, i)] = 1.0;
                z[(s, Theta::rs_index(n))] = space.level(s) as f64;
                z[(s, Theta::rn_index(n))] = -(1.0 + space.active_rivals(i, s) as f64).ln();
            }
        }
        flow.push(z);
    }
    let mut instant = DMatrix::zeros(n * 2 * k, p);
    for i in 0..n {
        for s in 0..k {
            if !space.is_active(i, s) {
                instant[((i * 2 + 1) * k + s, Theta::ec_index(n))] = -1.0;
            }
        }
    }
    PayoffDesign::new(n, 2, k, flow, instant).expect("design dimensions are consistent")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cfg(n: usize, levels: usize) -> GameConfig {
        GameConfig {
            n_players: n,
            n_choices: 2,
            market_levels: levels,
            lambda: 1.0,
            rho: 0.05,
            q_up: 0.2,
            q_down: 0.2,
            delta: 1.0,
        }
    }

    fn theta5() -> Theta {
        Theta {
            fc: vec![-1.9, -1.8, -1.7, -1.6, -1.5],
            rs: 1.0,
            rn: 1.0,
            ec: 1.0,
        }
    }

    #[test]
    fn encode_examples() {
        let s = StateSpace::new(5, 5).unwrap();
        assert_eq!(s.n_states(), 160);
        assert_eq!(s.encode(1, &[false; 5]).unwrap(), 0);
        assert_eq!(s.encode(5, &[true; 5]).unwrap(), 159);
        assert_eq!(
            s.encode(2, &[true, false, false, false, false]).unwrap(),
            33
        );
        assert!(s.encode(0, &[false; 5]).is_err());
        assert!(s.encode(6, &[false; 5]).is_err());
        assert!(s.encode(1, &[false; 4]).is_err());
    }

    #[test]
    fn encode_decode_exhaustive() {
        for (n, l) in [(1, 1), (3, 3), (5, 5), (8, 16)] {
            let s = StateSpace::new(n, l).unwrap();
            assert!(s.n_states() <= 4096);
            for k in 0..s.n_states() {
                let d = s.decode(k).unwrap();
                assert_eq!(s.encode(d.demand_level, &d.activity).unwrap(), k);
            }
        }
    }

    #[test]
    fn continuation_examples() {
        let s = StateSpace::new(5, 5).unwrap();
        let k = s.encode(3, &[true, false, true, false, false]).unwrap();
        let l = s.continuation_state(1, 1, k).unwrap();
        assert_eq!(
            s.decode(l).unwrap().activity,
            vec![true, true, true, false, false]
        );
        assert_eq!(s.level(l), 3);
        assert_eq!(s.continuation_state(0, 0, k).unwrap(), k);
        let twice = s
            .continuation_state(0, 1, s.continuation_state(0, 1, k).unwrap())
            .unwrap();
        assert_eq!(twice, k);
        assert!(s.continuation_state(5, 1, k).is_err());
    }

    #[test]
    fn entry_moves_exactly_one_bit() {
        let s = StateSpace::new(4, 3).unwrap();
        for k in 0..s.n_states() {
            for i in 0..4 {
                let l = s.continuation_state(i, 1, k).unwrap();
                assert_eq!(s.level(l), s.level(k));
                assert_eq!((k ^ l).count_ones(), 1);
            }
        }
    }

    #[test]
    fn flow_payoff_examples() {
        let s = StateSpace::new(5, 5).unwrap();
        let th = theta5();
        // firm 1 active alone at the lowest demand level: 1 − ln 1 − 1.9
        let k = s.encode(1, &[true, false, false, false, false]).unwrap();
        assert_relative_eq!(flow_payoff(&s, &th, 0, k), -0.9, epsilon = 1e-15);
        // all five active at level 2: 2 − ln 5 − 1.9
        let k = s.encode(2, &[true; 5]).unwrap();
        assert_relative_eq!(
            flow_payoff(&s, &th, 0, k),
            2.0 - 5f64.ln() - 1.9,
            epsilon = 1e-15
        );
        // inactive firms earn nothing
        let k = s.encode(4, &[false, true, true, false, false]).unwrap();
        assert_eq!(flow_payoff(&s, &th, 0, k), 0.0);
    }

    #[test]
    fn flow_payoff_rival_independent_without_competition() {
        let s = StateSpace::new(5, 5).unwrap();
        let th = Theta {
            rn: 0.0,
            ..theta5()
        };
        for mask in 0..32usize {
            let act: Vec<bool> = (0..5).map(|i| i == 0 || (mask >> i) & 1 == 1).collect();
            let k = s.encode(3, &act).unwrap();
            assert_relative_eq!(flow_payoff(&s, &th, 0, k), 3.0 - 1.9, epsilon = 1e-15);
        }
    }

    #[test]
    fn flow_payoff_decreasing_in_rivals() {
        let s = StateSpace::new(5, 5).unwrap();
        let th = theta5();
        for k in 0..s.n_states() {
            for i in 0..5 {
                if !s.is_active(i, k) {
                    continue;
                }
                for m in 0..5 {
                    if m != i && !s.is_active(m, k) {
                        let more = k | (1 << m);
                        assert!(flow_payoff(&s, &th, i, more) < flow_payoff(&s, &th, i, k));
                    }
                }
            }
        }
    }

    #[test]
    fn instant_payoff_examples() {
        let s = StateSpace::new(5, 5).unwrap();
        let th = theta5();
        let out = s.encode(2, &[false; 5]).unwrap();
        let inn = s.encode(2, &[true; 5]).unwrap();
        assert_eq!(instant_payoff(&s, &th, 0, 1, out), -1.0);
        assert_eq!(instant_payoff(&s, &th, 0, 0, out), 0.0);
        assert_eq!(instant_payoff(&s, &th, 0, 0, inn), 0.0);
        assert_eq!(instant_payoff(&s, &th, 0, 1, inn), 0.0);
    }

    #[test]
    fn nature_generator_structure() {
        let q = nature_generator(&cfg(2, 1)).unwrap();
        assert_eq!(q.matrix(), &DMatrix::zeros(4, 4));

        let c = GameConfig {
            q_up: 0.3,
            q_down: 0.3,
            ..cfg(5, 5)
        };
        let q = nature_generator(&c).unwrap();
        let s = StateSpace::new(5, 5).unwrap();
        for k in 0..160 {
            let row = q.matrix().row(k);
            assert!(row.sum().abs() < 1e-15);
            let off: Vec<f64> = (0..160)
                .filter(|&l| l != k && row[l] != 0.0)
                .map(|l| row[l])
                .collect();
            assert!(off.iter().all(|&v| v == 0.3));
            let expected = if s.level(k) == 1 || s.level(k) == 5 {
                1
            } else {
                2
            };
            assert_eq!(off.len(), expected);
        }
    }

    #[test]
    fn calibrate_identity_target() {
        let fit = calibrate_nature_rates(&DMatrix::identity(5, 5), 1.0).unwrap();
        assert_eq!((fit.q_up, fit.q_down), (0.0, 0.0));
        assert!(fit.residual < 1e-12);
    }

    #[test]
    fn calibrate_rejects_non_stochastic() {
        let mut t = am07_market_transition();
        t[(0, 0)] = 0.9;
        assert!(calibrate_nature_rates(&t, 1.0).is_err());
    }

    #[test]
    fn calibrate_symmetric_target() {
        let fit = calibrate_nature_rates(&am07_market_transition(), 1.0).unwrap();
        assert!((fit.q_up - fit.q_down).abs() < 1e-6, "{fit:?}");
    }

    #[test]
    fn payoff_design_reproduces_payoffs() {
        let game = EntryExitGame::new(cfg(3, 3)).unwrap();
        let th = Theta {
            fc: vec![-1.9, -1.8, -1.7],
            rs: 1.1,
            rn: 0.7,
            ec: 1.3,
        };
        let pay = game.payoffs(&th).unwrap();
        for i in 0..3 {
            for k in 0..game.n_states() {
                assert_relative_eq!(
                    pay.flow(i, k),
                    flow_payoff(game.space(), &th, i, k),
                    epsilon = 1e-14
                );
                for j in 0..2 {
                    assert_relative_eq!(
                        pay.instant(i, j, k),
                        instant_payoff(game.space(), &th, i, j, k),
                        epsilon = 1e-14
                    );
                }
            }
        }
    }
}
