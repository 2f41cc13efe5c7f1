//! Value functions, best responses and Markov perfect equilibria.
//!
//! Everything in this module is written for a generic finite game with
//! `N` players, `J` choices and `K` states. The entry/exit game in
//! [`crate::state_model`] is one instance.
//!
//! Probabilities `σ_ijk` are stored player-major, then choice, then state:
//! index `(i·J + j)·K + k`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::kernels::Generator;

/// Euler–Mascheroni constant, the mean of a standard type-1 extreme value draw.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Probabilities are clamped to `[LOG_FLOOR, 1 − LOG_FLOOR]` inside logs.
pub const LOG_FLOOR: f64 = 1e-12;

/// Choice and continuation structure of a game, plus nature's generator.
#[derive(Debug, Clone)]
pub struct GameStructure {
    n_players: usize,
    n_choices: usize,
    n_states: usize,
    lambda: f64,
    rho: f64,
    continuation: Vec<usize>,
    nature: Generator,
}

impl GameStructure {
    /// `continuation[(i·J + j)·K + k]` is `l(i, j, k)`. Choice 0 must be the
    /// costless continuation `l(i, 0, k) = k`.
    pub fn new(
        n_players: usize,
        n_choices: usize,
        n_states: usize,
        lambda: f64,
        rho: f64,
        continuation: Vec<usize>,
        nature: Generator,
    ) -> Result<Self> {
        if n_players == 0 || n_choices < 2 || n_states == 0 {
            return invalid("a game needs at least one player, two choices and one state");
        }
        if !(lambda > 0.0 && lambda.is_finite() && rho > 0.0 && rho.is_finite()) {
            return invalid(format!(
                "lambda and rho must be positive and finite, got {lambda}, {rho}"
            ));
        }
        if continuation.len() != n_players * n_choices * n_states {
            return invalid("continuation table has the wrong length");
        }
        if nature.dim() != n_states {
            return invalid("nature generator dimension does not match the state count");
        }
        for i in 0..n_players {
            for k in 0..n_states {
                if continuation[i * n_choices * n_states + k] != k {
                    return invalid(format!("choice 0 of player {i} must keep state {k}"));
                }
            }
        }
        if continuation.iter().any(|&l| l >= n_states) {
            return invalid("continuation state out of range");
        }
        Ok(Self {
            n_players,
            n_choices,
            n_states,
            lambda,
            rho,
            continuation,
            nature,
        })
    }

    pub fn n_players(&self) -> usize {
        self.n_players
    }

    pub fn n_choices(&self) -> usize {
        self.n_choices
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn nature(&self) -> &Generator {
        &self.nature
    }

    #[inline]
    pub fn continuation(&self, i: usize, j: usize, k: usize) -> usize {
        self.continuation[(i * self.n_choices + j) * self.n_states + k]
    }

    /// Same structure with a different discount rate.
    pub fn with_rho(&self, rho: f64) -> Result<Self> {
        let mut s = self.clone();
        if !(rho > 0.0 && rho.is_finite()) {
            return invalid(format!("rho must be positive, got {rho}"));
        }
        s.rho = rho;
        Ok(s)
    }
}

/// Payoffs linear in a parameter vector: flow `u_i = Z_i θ` and instant
/// `ψ_ijk = z_ijk θ`.
#[derive(Debug, Clone)]
pub struct PayoffDesign {
    n_players: usize,
    n_choices: usize,
    n_states: usize,
    flow: Vec<DMatrix<f64>>,
    instant: DMatrix<f64>,
}

impl PayoffDesign {
    /// `flow[i]` is K×p; `instant` is (N·J·K)×p in CCP order.
    pub fn new(
        n_players: usize,
        n_choices: usize,
        n_states: usize,
        flow: Vec<DMatrix<f64>>,
        instant: DMatrix<f64>,
    ) -> Result<Self> {
        let p = instant.ncols();
        if flow.len() != n_players || flow.iter().any(|z| z.nrows() != n_states || z.ncols() != p) {
            return invalid("flow design must be one K×p block per player");
        }
        if instant.nrows() != n_players * n_choices * n_states {
            return invalid("instant design must have N·J·K rows");
        }
        Ok(Self {
            n_players,
            n_choices,
            n_states,
            flow,
            instant,
        })
    }

    pub fn n_params(&self) -> usize {
        self.instant.ncols()
    }

    pub fn flow_design(&self, i: usize) -> &DMatrix<f64> {
        &self.flow[i]
    }

    pub fn instant_design(&self) -> &DMatrix<f64> {
        &self.instant
    }

    pub fn evaluate(&self, theta: &[f64]) -> Result<Payoffs> {
        if theta.len() != self.n_params() {
            return invalid(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                theta.len()
            ));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return invalid("parameters must be finite");
        }
        let th = DVector::from_column_slice(theta);
        let mut flow = DMatrix::zeros(self.n_states, self.n_players);
        for (i, z) in self.flow.iter().enumerate() {
            flow.set_column(i, &(z * &th));
        }
        let instant = (&self.instant * &th).as_slice().to_vec();
        Payoffs::new(self.n_choices, flow, instant)
    }
}

/// Evaluated payoffs: flow profits `u_ik` and instant payoffs `ψ_ijk`.
#[derive(Debug, Clone, PartialEq)]
pub struct Payoffs {
    n_choices: usize,
    flow: DMatrix<f64>,
    instant: Vec<f64>,
}

impl Payoffs {
    /// `flow` is K×N (one column per player); `instant` in CCP order.
    pub fn new(n_choices: usize, flow: DMatrix<f64>, instant: Vec<f64>) -> Result<Self> {
        if instant.len() != flow.ncols() * n_choices * flow.nrows() {
            return invalid("instant payoffs must have N·J·K entries");
        }
        if flow.iter().chain(instant.iter()).any(|v| !v.is_finite()) {
            return invalid("payoffs must be finite");
        }
        Ok(Self {
            n_choices,
            flow,
            instant,
        })
    }

    #[inline]
    pub fn flow(&self, i: usize, k: usize) -> f64 {
        self.flow[(k, i)]
    }

    #[inline]
    pub fn instant(&self, i: usize, j: usize, k: usize) -> f64 {
        self.instant[(i * self.n_choices + j) * self.flow.nrows() + k]
    }

    pub fn flow_matrix(&self) -> &DMatrix<f64> {
        &self.flow
    }
}

/// Conditional choice probabilities `σ_ijk`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CcpVector {
    n_players: usize,
    n_choices: usize,
    n_states: usize,
    probs: Vec<f64>,
}

impl CcpVector {
    pub fn new(
        n_players: usize,
        n_choices: usize,
        n_states: usize,
        probs: Vec<f64>,
    ) -> Result<Self> {
        let s = Self {
            n_players,
            n_choices,
            n_states,
            probs,
        };
        s.validate(1e-12)?;
        Ok(s)
    }

    pub fn uniform(n_players: usize, n_choices: usize, n_states: usize) -> Self {
        let p = 1.0 / n_choices as f64;
        Self {
            n_players,
            n_choices,
            n_states,
            probs: vec![p; n_players * n_choices * n_states],
        }
    }

    /// Builds σ from the free coordinates (every choice except 0), laid out
    /// `(i·(J−1) + j − 1)·K + k`.
    pub fn from_free(
        n_players: usize,
        n_choices: usize,
        n_states: usize,
        free: &[f64],
    ) -> Result<Self> {
        let jf = n_choices - 1;
        if free.len() != n_players * jf * n_states {
            return invalid(format!(
                "expected {} free coordinates, got {}",
                n_players * jf * n_states,
                free.len()
            ));
        }
        let mut probs = vec![0.0; n_players * n_choices * n_states];
        for i in 0..n_players {
            for k in 0..n_states {
                let mut rest = 1.0;
                for j in 1..n_choices {
                    let v = free[(i * jf + j - 1) * n_states + k];
                    probs[(i * n_choices + j) * n_states + k] = v;
                    rest -= v;
                }
                probs[i * n_choices * n_states + k] = rest;
            }
        }
        Ok(Self {
            n_players,
            n_choices,
            n_states,
            probs,
        })
    }

    pub fn validate(&self, tol: f64) -> Result<()> {
        if self.probs.len() != self.n_players * self.n_choices * self.n_states {
            return invalid("CCP vector has the wrong length");
        }
        for i in 0..self.n_players {
            for k in 0..self.n_states {
                let mut sum = 0.0;
                for j in 0..self.n_choices {
                    let v = self.get(i, j, k);
                    if !(v > 0.0 && v < 1.0) {
                        return invalid(format!(
                            "sigma({i},{j},{k}) = {v} is not strictly inside (0,1)"
                        ));
                    }
                    sum += v;
                }
                if (sum - 1.0).abs() > tol {
                    return invalid(format!(
                        "probabilities of player {i} in state {k} sum to {sum}"
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn n_players(&self) -> usize {
        self.n_players
    }

    pub fn n_choices(&self) -> usize {
        self.n_choices
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.probs[(i * self.n_choices + j) * self.n_states + k]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    /// Free coordinates, the inverse of [`CcpVector::from_free`].
    pub fn free(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_players * (self.n_choices - 1) * self.n_states);
        for i in 0..self.n_players {
            for j in 1..self.n_choices {
                out.extend((0..self.n_states).map(|k| self.get(i, j, k)));
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &CcpVector) -> f64 {
        self.probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Clamps every probability into `[floor, 1 − floor]` and renormalizes.
    pub fn clamp_interior(&mut self, floor: f64) {
        for i in 0..self.n_players {
            for k in 0..self.n_states {
                let mut sum = 0.0;
                for j in 0..self.n_choices {
                    let idx = (i * self.n_choices + j) * self.n_states + k;
                    self.probs[idx] = self.probs[idx].clamp(floor, 1.0 - floor);
                    sum += self.probs[idx];
                }
                for j in 0..self.n_choices {
                    self.probs[(i * self.n_choices + j) * self.n_states + k] /= sum;
                }
            }
        }
    }

    /// `(1 − ω)·self + ω·other`.
    pub fn blend(&self, other: &CcpVector, omega: f64) -> CcpVector {
        let probs = self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (1.0 - omega) * a + omega * b)
            .collect();
        CcpVector { probs, ..*self }
    }

    fn check_shape(&self, s: &GameStructure) -> Result<()> {
        if self.n_players != s.n_players
            || self.n_choices != s.n_choices
            || self.n_states != s.n_states
        {
            return invalid(format!(
                "CCP shape {}x{}x{} does not match game {}x{}x{}",
                self.n_players, self.n_choices, self.n_states, s.n_players, s.n_choices, s.n_states
            ));
        }
        Ok(())
    }
}

/// `V_ik`, one column per player.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunction(DMatrix<f64>);

impl ValueFunction {
    pub fn new(values: DMatrix<f64>) -> Self {
        Self(values)
    }

    #[inline]
    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.0[(k, i)]
    }

    /// K×N matrix of values.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// Intensity matrix of player `i`'s moves: rate `λσ_ijk` towards `l(i,j,k)`.
pub fn choice_generator(s: &GameStructure, i: usize, sigma: &CcpVector) -> Result<Generator> {
    sigma.check_shape(s)?;
    if i >= s.n_players {
        return invalid(format!("player {i} out of range"));
    }
    let k = s.n_states;
    let mut q = DMatrix::zeros(k, k);
    add_choice_rates(s, i, sigma, &mut q);
    Generator::from_rates(q)
}

fn add_choice_rates(s: &GameStructure, i: usize, sigma: &CcpVector, q: &mut DMatrix<f64>) {
    for j in 1..s.n_choices {
        for k in 0..s.n_states {
            let l = s.continuation(i, j, k);
            if l != k {
                q[(k, l)] += s.lambda * sigma.get(i, j, k);
            }
        }
    }
}

/// `Q(σ) = Q₀ + Σ_i Q_i(σ_i)`.
pub fn aggregate_generator(s: &GameStructure, sigma: &CcpVector) -> Result<Generator> {
    sigma.check_shape(s)?;
    let mut q = s.nature.matrix().clone();
    for i in 0..s.n_players {
        add_choice_rates(s, i, sigma, &mut q);
    }
    Generator::from_rates(q)
}

/// Jump matrix `Σ_m(σ_m)`: the state after player `m`'s decision epoch.
pub fn jump_matrix(s: &GameStructure, m: usize, sigma: &CcpVector) -> DMatrix<f64> {
    let k = s.n_states;
    let mut out = DMatrix::zeros(k, k);
    for j in 0..s.n_choices {
        for r in 0..k {
            out[(r, s.continuation(m, j, r))] += sigma.get(m, j, r);
        }
    }
    out
}

/// `Ξ(σ) = (ρ + Nλ)I − λ Σ_m Σ_m(σ_m) − Q₀`.
pub fn valuation_matrix(s: &GameStructure, sigma: &CcpVector) -> Result<DMatrix<f64>> {
    sigma.check_shape(s)?;
    let k = s.n_states;
    let mut xi = DMatrix::identity(k, k) * (s.rho + s.n_players as f64 * s.lambda);
    for m in 0..s.n_players {
        xi -= jump_matrix(s, m, sigma) * s.lambda;
    }
    xi -= s.nature.matrix();
    Ok(xi)
}

fn log_clamped(p: f64) -> f64 {
    p.clamp(LOG_FLOOR, 1.0 - LOG_FLOOR).ln()
}

/// `E_ik = Σ_j σ_ijk (ψ_ijk + γ − ln σ_ijk)`.
pub fn expected_instant_payoff(
    s: &GameStructure,
    payoffs: &Payoffs,
    sigma: &CcpVector,
    i: usize,
) -> Result<DVector<f64>> {
    sigma.check_shape(s)?;
    let mut e = DVector::zeros(s.n_states);
    for k in 0..s.n_states {
        let mut acc = 0.0;
        for j in 0..s.n_choices {
            let p = sigma.get(i, j, k);
            if !(p > 0.0) {
                return Err(Error::Domain(format!(
                    "sigma({i},{j},{k}) = {p} is not positive"
                )));
            }
            acc += p * (payoffs.instant(i, j, k) + EULER_GAMMA - log_clamped(p));
        }
        e[k] = acc;
    }
    Ok(e)
}

/// Solves `Ξ(σ) V_i = u_i + λ E_i(σ)` for every player with one LU factorization.
pub fn value_function(
    s: &GameStructure,
    payoffs: &Payoffs,
    sigma: &CcpVector,
) -> Result<ValueFunction> {
    let xi = valuation_matrix(s, sigma)?;
    let mut rhs = payoffs.flow_matrix().clone();
    if rhs.nrows() != s.n_states || rhs.ncols() != s.n_players {
        return invalid("payoff dimensions do not match the game");
    }
    for i in 0..s.n_players {
        let e = expected_instant_payoff(s, payoffs, sigma, i)?;
        let mut col = rhs.column_mut(i);
        col.axpy(s.lambda, &e, 1.0);
    }
    let v = xi
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numeric("valuation matrix is singular".into()))?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("value function is not finite".into()));
    }
    Ok(ValueFunction(v))
}

/// Logit over choice-specific values `ψ_ijk + V_i(l(i,j,k))`.
pub fn best_response(s: &GameStructure, payoffs: &Payoffs, v: &ValueFunction) -> CcpVector {
    let (n, jn, kn) = (s.n_players, s.n_choices, s.n_states);
    let mut probs = vec![0.0; n * jn * kn];
    let mut vals = vec![0.0; jn];
    for i in 0..n {
        for k in 0..kn {
            for (j, slot) in vals.iter_mut().enumerate() {
                *slot = payoffs.instant(i, j, k) + v.get(i, s.continuation(i, j, k));
            }
            write_logit(&vals, |j, p| probs[(i * jn + j) * kn + k] = p);
        }
    }
    CcpVector {
        n_players: n,
        n_choices: jn,
        n_states: kn,
        probs,
    }
}

// Softmax with max subtraction; probabilities are kept strictly positive.
pub(crate) fn write_logit(vals: &[f64], mut put: impl FnMut(usize, f64)) {
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for &x in vals {
        z += (x - m).exp().max(f64::MIN_POSITIVE);
    }
    for (j, &x) in vals.iter().enumerate() {
        put(j, (x - m).exp().max(f64::MIN_POSITIVE) / z);
    }
}

/// `Ψ(θ, σ) = Γ(Υ(θ, σ))`.
pub fn psi_map(s: &GameStructure, payoffs: &Payoffs, sigma: &CcpVector) -> Result<CcpVector> {
    let v = value_function(s, payoffs, sigma)?;
    Ok(best_response(s, payoffs, &v))
}

/// Settings for [`solve_mpe`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// ω in `σ ← (1 − ω)σ + ωΨ(σ)`.
    pub damping: f64,
    /// Damping factors tried in turn when iteration at `damping` stalls.
    pub fallback_damping: Vec<f64>,
    /// Stall check: residual must shrink by 10% over this many iterations.
    pub stall_window: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 10_000,
            damping: 1.0,
            fallback_damping: vec![0.5, 0.25],
            stall_window: 250,
        }
    }
}

/// Result of an equilibrium computation.
#[derive(Debug, Clone)]
pub struct MpeSolution {
    pub sigma: CcpVector,
    pub values: ValueFunction,
    /// Updates performed, summed over damping attempts.
    pub iterations: usize,
    /// `‖Ψ(σ) − σ‖∞` at the returned σ.
    pub residual: f64,
    /// Damping factor of the successful run.
    pub damping: f64,
    /// Residual before each update of the successful run.
    pub trace: Vec<f64>,
}

/// Damped successive approximation on Ψ.
pub fn solve_mpe(
    s: &GameStructure,
    payoffs: &Payoffs,
    init: &CcpVector,
    opts: &SolveOptions,
) -> Result<MpeSolution> {
    init.check_shape(s)?;
    init.validate(1e-9)?;
    if !(opts.tol > 0.0) || opts.max_iter == 0 {
        return invalid("solver needs a positive tolerance and at least one iteration");
    }
    let mut dampings = vec![opts.damping];
    dampings.extend(opts.fallback_damping.iter().copied());
    if dampings.iter().any(|&w| !(w > 0.0 && w <= 1.0)) {
        return invalid("damping factors must lie in (0, 1]");
    }

    let mut total = 0;
    let mut last_residual = f64::INFINITY;
    for (attempt, &omega) in dampings.iter().enumerate() {
        let mut sigma = init.clone();
        let mut trace = Vec::new();
        let budget = opts.max_iter.saturating_sub(total).max(1);
        let mut stalled = false;
        for it in 0..=budget {
            let v = value_function(s, payoffs, &sigma)?;
            let next = best_response(s, payoffs, &v);
            let res = next.max_abs_diff(&sigma);
            last_residual = res;
            if !res.is_finite() {
                return Err(Error::Numeric("non-finite fixed-point residual".into()));
            }
            if res < opts.tol {
                log::debug!(
                    "MPE converged: {} updates, damping {omega}, residual {res:.3e}",
                    total + it
                );
                return Ok(MpeSolution {
                    sigma,
                    values: v,
                    iterations: total + it,
                    residual: res,
                    damping: omega,
                    trace,
                });
            }
            trace.push(res);
            let w = opts.stall_window;
            if w > 0 && it >= 2 * w && res > 0.9 * trace[it - w] && attempt + 1 < dampings.len() {
                stalled = true;
                total += it;
                break;
            }
            if it == budget {
                total += it;
                break;
            }
            sigma = sigma.blend(&next, omega);
        }
        if stalled {
            log::info!("MPE iteration stalled at damping {omega} (residual {last_residual:.3e}); retrying damped");
        }
        if total >= opts.max_iter {
            break;
        }
    }
    Err(Error::NonConvergence {
        iterations: total,
        residual: last_residual,
    })
}

/// `‖Ψ(θ, σ) − σ‖∞`.
pub fn fixed_point_residual(
    s: &GameStructure,
    payoffs: &Payoffs,
    sigma: &CcpVector,
) -> Result<f64> {
    Ok(psi_map(s, payoffs, sigma)?.max_abs_diff(sigma))
}

/// Choice-specific values of Ψ(θ, σ̄) written as affine functions of θ for
/// fixed σ̄: `v_ijk(θ) = D_ijk·θ + c_ijk`.
///
/// `V_i = Ξ⁻¹(Z_i θ + e_i) = W_i θ + ẽ_i` with `Z_i` stacking the flow design
/// and λ-weighted expected instant-payoff design, and `e_i` the entropy
/// terms. One factorization of Ξ serves all θ.
#[derive(Debug, Clone)]
pub struct PsiLinearization {
    n_players: usize,
    n_choices: usize,
    n_states: usize,
    d: DMatrix<f64>,
    c: DVector<f64>,
}

impl PsiLinearization {
    pub fn new(s: &GameStructure, design: &PayoffDesign, sigma: &CcpVector) -> Result<Self> {
        sigma.check_shape(s)?;
        let (n, jn, kn) = (s.n_players, s.n_choices, s.n_states);
        let p = design.n_params();
        let xi = valuation_matrix(s, sigma)?;
        let lu = xi.lu();

        let mut rhs = DMatrix::zeros(kn, n * (p + 1));
        for i in 0..n {
            let zu = design.flow_design(i);
            for k in 0..kn {
                for c in 0..p {
                    let mut z = zu[(k, c)];
                    for j in 0..jn {
                        z += s.lambda
                            * sigma.get(i, j, k)
                            * design.instant_design()[((i * jn + j) * kn + k, c)];
                    }
                    rhs[(k, i * (p + 1) + c)] = z;
                }
                let mut e = 0.0;
                for j in 0..jn {
                    let q = sigma.get(i, j, k);
                    if !(q > 0.0) {
                        return Err(Error::Domain(format!(
                            "sigma({i},{j},{k}) = {q} is not positive"
                        )));
                    }
                    e += q * (EULER_GAMMA - log_clamped(q));
                }
                rhs[(k, i * (p + 1) + p)] = s.lambda * e;
            }
        }
        let sol = lu
            .solve(&rhs)
            .ok_or_else(|| Error::Numeric("valuation matrix is singular".into()))?;

        let mut d = DMatrix::zeros(n * jn * kn, p);
        let mut c = DVector::zeros(n * jn * kn);
        for i in 0..n {
            for j in 0..jn {
                for k in 0..kn {
                    let row = (i * jn + j) * kn + k;
                    let l = s.continuation(i, j, k);
                    for col in 0..p {
                        d[(row, col)] =
                            design.instant_design()[(row, col)] + sol[(l, i * (p + 1) + col)];
                    }
                    c[row] = sol[(l, i * (p + 1) + p)];
                }
            }
        }
        Ok(Self {
            n_players: n,
            n_choices: jn,
            n_states: kn,
            d,
            c,
        })
    }

    /// `D`, rows in CCP order.
    pub fn slopes(&self) -> &DMatrix<f64> {
        &self.d
    }

    pub fn offsets(&self) -> &DVector<f64> {
        &self.c
    }

    pub fn choice_values(&self, theta: &[f64]) -> DVector<f64> {
        &self.d * DVector::from_column_slice(theta) + &self.c
    }

    /// Ψ(θ, σ̄) through the linearization.
    pub fn evaluate(&self, theta: &[f64]) -> Result<CcpVector> {
        if theta.len() != self.d.ncols() {
            return invalid(format!(
                "expected {} parameters, got {}",
                self.d.ncols(),
                theta.len()
            ));
        }
        let v = self.choice_values(theta);
        let (n, jn, kn) = (self.n_players, self.n_choices, self.n_states);
        let mut probs = vec![0.0; n * jn * kn];
        let mut vals = vec![0.0; jn];
        for i in 0..n {
            for k in 0..kn {
                for (j, slot) in vals.iter_mut().enumerate() {
                    *slot = v[(i * jn + j) * kn + k];
                }
                write_logit(&vals, |j, p| probs[(i * jn + j) * kn + k] = p);
            }
        }
        Ok(CcpVector {
            n_players: n,
            n_choices: jn,
            n_states: kn,
            probs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state_model::{EntryExitGame, GameConfig, Theta};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn config(n: usize, levels: usize) -> GameConfig {
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

    fn theta(n: usize, rn: f64, ec: f64) -> Theta {
        let fc = [-1.9, -1.8, -1.7, -1.6, -1.5];
        Theta {
            fc: fc[..n].to_vec(),
            rs: 1.0,
            rn,
            ec,
        }
    }

    // One player, two states, choice 1 switches state.
    fn two_state(u: [f64; 2], psi1: [f64; 2], lambda: f64, rho: f64) -> (GameStructure, Payoffs) {
        let s = GameStructure::new(1, 2, 2, lambda, rho, vec![0, 1, 1, 0], Generator::zeros(2))
            .unwrap();
        let p = Payoffs::new(
            2,
            DMatrix::from_column_slice(2, 1, &u),
            vec![0.0, 0.0, psi1[0], psi1[1]],
        )
        .unwrap();
        (s, p)
    }

    fn ccp_from(n: usize, k: usize, p1: &[f64]) -> CcpVector {
        CcpVector::from_free(n, 2, k, p1).unwrap()
    }

    #[test]
    fn choice_generator_examples() {
        let game = EntryExitGame::new(config(2, 2)).unwrap();
        let s = game.structure();
        let q = choice_generator(s, 0, &ccp_from(2, 8, &[0.0; 16])).unwrap();
        assert!(q.matrix().iter().all(|&v| v == 0.0));

        let mut free = vec![0.3; 16];
        free[..8].fill(1.0);
        let sig = CcpVector::from_free(2, 2, 8, &free).unwrap();
        let q = choice_generator(s, 0, &sig).unwrap();
        for k in 0..8 {
            assert_eq!(q.matrix()[(k, k ^ 1)], 1.0);
            assert_eq!(q.matrix()[(k, k)], -1.0);
            assert_eq!(q.matrix().row(k).iter().filter(|v| **v != 0.0).count(), 2);
        }
    }

    #[test]
    fn expected_instant_payoff_examples() {
        let (s, p) = two_state([0.0, 0.0], [0.0, 0.0], 1.0, 0.05);
        let e = expected_instant_payoff(&s, &p, &ccp_from(1, 2, &[0.5, 0.5]), 0).unwrap();
        assert_relative_eq!(e[0], EULER_GAMMA + 2f64.ln(), epsilon = 1e-14);
        assert_relative_eq!(e[0], 1.27036, epsilon = 1e-5);

        let e = expected_instant_payoff(&s, &p, &ccp_from(1, 2, &[1e-15, 1e-15]), 0).unwrap();
        assert_relative_eq!(e[0], EULER_GAMMA, epsilon = 1e-10);

        let (s, p) = two_state([0.0, 0.0], [-1.0, -1.0], 1.0, 0.05);
        let e = expected_instant_payoff(&s, &p, &ccp_from(1, 2, &[0.7, 0.7]), 0).unwrap();
        let want = 0.3 * (EULER_GAMMA - 0.3f64.ln()) + 0.7 * (-1.0 + EULER_GAMMA - 0.7f64.ln());
        assert_relative_eq!(e[0], want, epsilon = 1e-14);
        assert_relative_eq!(e[0], 0.488080, epsilon = 1e-6);
    }

    #[test]
    fn expected_instant_payoff_rejects_zero() {
        let (s, p) = two_state([0.0, 0.0], [0.0, 0.0], 1.0, 0.05);
        let sig = CcpVector {
            n_players: 1,
            n_choices: 2,
            n_states: 2,
            probs: vec![1.0, 0.5, 0.0, 0.5],
        };
        assert!(matches!(
            expected_instant_payoff(&s, &p, &sig, 0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn value_function_symmetric_states() {
        let (s, p) = two_state([2.0, 2.0], [0.0, 0.0], 1.0, 0.05);
        let v = value_function(&s, &p, &ccp_from(1, 2, &[0.5, 0.5])).unwrap();
        assert_relative_eq!(v.get(0, 0), v.get(0, 1), epsilon = 1e-12);
        // V = (u + λE)/ρ when both states are identical
        let want = (2.0 + EULER_GAMMA + 2f64.ln()) / 0.05;
        assert_relative_eq!(v.get(0, 0), want, max_relative = 1e-12);
    }

    #[test]
    fn value_function_two_state_by_hand() {
        // Ξ = [[ρ+λa, −λa], [−λb, ρ+λb]] with a, b the switching probabilities.
        let (rho, lambda, a, b) = (0.1, 2.0, 0.3, 0.6);
        let (s, p) = two_state([1.0, -0.5], [-0.4, 0.2], lambda, rho);
        let sig = ccp_from(1, 2, &[a, b]);
        let v = value_function(&s, &p, &sig).unwrap();
        let e = |q: f64, psi: f64| {
            (1.0 - q) * (EULER_GAMMA - (1.0 - q).ln()) + q * (psi + EULER_GAMMA - q.ln())
        };
        let r0 = 1.0 + lambda * e(a, -0.4);
        let r1 = -0.5 + lambda * e(b, 0.2);
        let (m00, m01, m10, m11) = (rho + lambda * a, -lambda * a, -lambda * b, rho + lambda * b);
        let det = m00 * m11 - m01 * m10;
        assert_relative_eq!(
            v.get(0, 0),
            (m11 * r0 - m01 * r1) / det,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            v.get(0, 1),
            (m00 * r1 - m10 * r0) / det,
            max_relative = 1e-12
        );
    }

    #[test]
    fn value_function_vanishes_under_heavy_discounting() {
        let game = EntryExitGame::new(GameConfig {
            rho: 1e6,
            ..config(2, 3)
        })
        .unwrap();
        let th = theta(2, 1.0, 1.0);
        let pay = game.payoffs(&th).unwrap();
        let v = value_function(
            game.structure(),
            &pay,
            &CcpVector::uniform(2, 2, game.n_states()),
        )
        .unwrap();
        let umax = pay.flow_matrix().amax();
        assert!(v.matrix().amax() < 1e-4 * umax);
    }

    #[test]
    fn value_function_solves_bellman_state_by_state() {
        let game = EntryExitGame::new(config(3, 3)).unwrap();
        let s = game.structure();
        let pay = game
            .payoffs(&Theta {
                fc: vec![-1.9, -1.8, -1.7],
                rs: 1.0,
                rn: 1.5,
                ec: 1.2,
            })
            .unwrap();
        let free: Vec<f64> = (0..72)
            .map(|x| 0.05 + 0.9 * ((x * 37 % 71) as f64 / 71.0))
            .collect();
        let sig = ccp_from(3, 24, &free);
        let v = value_function(s, &pay, &sig).unwrap();
        let q0 = s.nature().matrix();
        for i in 0..3 {
            for k in 0..24 {
                // pre-limit Bellman equation with rivals' moves and nature as competing hazards
                let mut num = pay.flow(i, k);
                let mut den = s.rho() + s.lambda();
                for l in 0..24 {
                    if l != k {
                        num += q0[(k, l)] * v.get(i, l);
                        den += q0[(k, l)];
                    }
                }
                for m in (0..3).filter(|&m| m != i) {
                    let l = s.continuation(m, 1, k);
                    let rate = s.lambda() * sig.get(m, 1, k);
                    num += rate * v.get(i, l);
                    den += rate;
                }
                for j in 0..2 {
                    let q = sig.get(i, j, k);
                    num += s.lambda()
                        * q
                        * (pay.instant(i, j, k) + EULER_GAMMA - q.ln()
                            + v.get(i, s.continuation(i, j, k)));
                }
                assert_relative_eq!(v.get(i, k), num / den, max_relative = 1e-8);
            }
        }
    }

    #[test]
    fn best_response_examples() {
        let (s, p) = two_state([0.0, 0.0], [0.0, 0.0], 1.0, 0.05);
        let br = best_response(
            &s,
            &p,
            &ValueFunction::new(DMatrix::from_column_slice(2, 1, &[1.0, 1.0])),
        );
        assert!(br.as_slice().iter().all(|&x| (x - 0.5).abs() < 1e-15));

        let br = best_response(
            &s,
            &p,
            &ValueFunction::new(DMatrix::from_column_slice(2, 1, &[0.0, 3f64.ln()])),
        );
        assert_relative_eq!(br.get(0, 1, 0), 0.75, epsilon = 1e-15);
        assert_relative_eq!(br.get(0, 1, 1), 0.25, epsilon = 1e-15);

        let br = best_response(
            &s,
            &p,
            &ValueFunction::new(DMatrix::from_column_slice(2, 1, &[0.0, 2000.0])),
        );
        assert!(br.get(0, 0, 0) > 0.0 && br.get(0, 1, 0) == 1.0);
    }

    #[test]
    fn best_response_general_choices() {
        // three choices: stay, move to state 1, move to state 2
        let cont = vec![0, 1, 2, 1, 1, 1, 2, 2, 2];
        let s = GameStructure::new(1, 3, 3, 1.0, 0.05, cont, Generator::zeros(3)).unwrap();
        let p = Payoffs::new(3, DMatrix::zeros(3, 1), vec![0.0; 9]).unwrap();
        let br = best_response(
            &s,
            &p,
            &ValueFunction::new(DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 2.0])),
        );
        let z = 1.0 + 1f64.exp() + 2f64.exp();
        assert_relative_eq!(br.get(0, 0, 0), 1.0 / z, epsilon = 1e-15);
        assert_relative_eq!(br.get(0, 2, 0), 2f64.exp() / z, epsilon = 1e-15);
        assert_relative_eq!(br.get(0, 0, 1), 1.0 / (2.0 + 1f64.exp()), epsilon = 1e-15);
        let sol = solve_mpe(
            &s,
            &p,
            &CcpVector::uniform(1, 3, 3),
            &SolveOptions::default(),
        )
        .unwrap();
        assert!(sol.residual < 1e-10);
    }

    #[test]
    fn constant_flow_shift_moves_values_uniformly() {
        let game = EntryExitGame::new(config(2, 3)).unwrap();
        let s = game.structure();
        let pay = game.payoffs(&theta(2, 1.0, 1.0)).unwrap();
        let c = 0.7;
        let shifted =
            Payoffs::new(2, pay.flow_matrix().add_scalar(c), pay.instant.clone()).unwrap();
        let sig = CcpVector::uniform(2, 2, game.n_states());
        let v0 = value_function(s, &pay, &sig).unwrap();
        let v1 = value_function(s, &shifted, &sig).unwrap();
        for (a, b) in v0.matrix().iter().zip(v1.matrix().iter()) {
            assert_relative_eq!(b - a, c / s.rho(), max_relative = 1e-9);
        }
        let b0 = best_response(s, &pay, &v0);
        let b1 = best_response(s, &shifted, &v1);
        assert!(b0.max_abs_diff(&b1) < 1e-12);
    }

    #[test]
    fn mpe_is_fixed_point_and_restart_is_immediate() {
        let game = EntryExitGame::new(config(3, 3)).unwrap();
        let pay = game.payoffs(&theta(3, 1.0, 1.0)).unwrap();
        let sol = solve_mpe(
            game.structure(),
            &pay,
            &CcpVector::uniform(3, 2, 24),
            &SolveOptions::default(),
        )
        .unwrap();
        assert!(sol.residual < 1e-10);
        assert!(fixed_point_residual(game.structure(), &pay, &sol.sigma).unwrap() < 1e-10);
        let again =
            solve_mpe(game.structure(), &pay, &sol.sigma, &SolveOptions::default()).unwrap();
        assert!(again.iterations <= 2);
    }

    #[test]
    fn mpe_non_convergence_reports_residual() {
        let game = EntryExitGame::new(config(3, 3)).unwrap();
        let pay = game.payoffs(&theta(3, 1.0, 1.0)).unwrap();
        let opts = SolveOptions {
            max_iter: 2,
            fallback_damping: vec![],
            ..SolveOptions::default()
        };
        match solve_mpe(game.structure(), &pay, &CcpVector::uniform(3, 2, 24), &opts) {
            Err(Error::NonConvergence {
                iterations,
                residual,
            }) => {
                assert_eq!(iterations, 2);
                assert!(residual > 1e-10 && residual.is_finite());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn symmetric_firms_give_symmetric_equilibrium() {
        let game = EntryExitGame::new(config(2, 3)).unwrap();
        let th = Theta {
            fc: vec![-1.7, -1.7],
            rs: 1.0,
            rn: 1.0,
            ec: 1.0,
        };
        let pay = game.payoffs(&th).unwrap();
        let sol = solve_mpe(
            game.structure(),
            &pay,
            &CcpVector::uniform(2, 2, 12),
            &SolveOptions::default(),
        )
        .unwrap();
        let sp = game.space();
        for k in 0..12 {
            let d = sp.decode(k).unwrap();
            let swapped = sp
                .encode(d.demand_level, &[d.activity[1], d.activity[0]])
                .unwrap();
            assert_relative_eq!(
                sol.sigma.get(0, 1, k),
                sol.sigma.get(1, 1, swapped),
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn no_competition_decouples_into_single_agent_problems() {
        let game = EntryExitGame::new(config(5, 5)).unwrap();
        let th = theta(5, 0.0, 1.0);
        let sol = solve_mpe(
            game.structure(),
            &game.payoffs(&th).unwrap(),
            &CcpVector::uniform(5, 2, 160),
            &SolveOptions::default(),
        )
        .unwrap();
        let sp = game.space();
        for i in 0..5 {
            let single = EntryExitGame::new(config(1, 5)).unwrap();
            let th1 = Theta {
                fc: vec![th.fc[i]],
                ..th.clone()
            };
            let s1 = solve_mpe(
                single.structure(),
                &single.payoffs(&th1).unwrap(),
                &CcpVector::uniform(1, 2, 10),
                &SolveOptions::default(),
            )
            .unwrap();
            for k in 0..160 {
                let k1 = single
                    .space()
                    .encode(sp.level(k), &[sp.is_active(i, k)])
                    .unwrap();
                assert_relative_eq!(
                    sol.sigma.get(i, 1, k),
                    s1.sigma.get(0, 1, k1),
                    epsilon = 1e-9
                );
            }
        }
    }

    #[test]
    fn linearization_reproduces_psi() {
        let game = EntryExitGame::new(config(3, 3)).unwrap();
        let s = game.structure();
        let free: Vec<f64> = (0..72)
            .map(|x| 0.05 + 0.9 * ((x * 29 % 67) as f64 / 67.0))
            .collect();
        let sig = ccp_from(3, 24, &free);
        let lin = PsiLinearization::new(s, game.payoff_design(), &sig).unwrap();
        for th in [
            theta(3, 1.0, 1.0),
            Theta {
                fc: vec![0.3, -2.0, 1.0],
                rs: 0.4,
                rn: 2.5,
                ec: -0.7,
            },
        ] {
            let direct = psi_map(s, &game.payoffs(&th).unwrap(), &sig).unwrap();
            let via = lin.evaluate(&th.to_vec()).unwrap();
            assert!(direct.max_abs_diff(&via) < 1e-10);
        }
    }

    proptest! {
        #[test]
        fn psi_stays_on_simplex(seed in proptest::collection::vec(0.01f64..0.99, 24), rn in 0.0f64..4.0, ec in 0.0f64..3.0) {
            let game = EntryExitGame::new(config(2, 3)).unwrap();
            let sig = ccp_from(2, 12, &seed);
            let out = psi_map(game.structure(), &game.payoffs(&theta(2, rn, ec)).unwrap(), &sig).unwrap();
            prop_assert!(out.validate(1e-14).is_ok());
        }

        #[test]
        fn choice_generator_rows_sum_to_zero(seed in proptest::collection::vec(0.0f64..1.0, 24)) {
            let game = EntryExitGame::new(config(2, 3)).unwrap();
            let sig = CcpVector::from_free(2, 2, 12, &seed).unwrap();
            for i in 0..2 {
                let q = choice_generator(game.structure(), i, &sig).unwrap();
                for k in 0..12 {
                    prop_assert!(q.matrix().row(k).sum().abs() < 1e-15);
                }
            }
        }
    }
}
