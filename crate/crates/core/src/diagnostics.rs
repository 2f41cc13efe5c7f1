//! Jacobians of Ψ, the local-stability objects of the NPL mapping and
//! spectral radii.
//!
//! Jacobians in σ use the free coordinates `σ_ijk, j ≥ 1` (for two
//! choices, `σ_i1k`); `σ_i0k` moves with them so that perturbed points stay
//! on the simplex.

use nalgebra::{DMatrix, DVector, Schur};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::equilibrium::{
    aggregate_generator, psi_map, solve_mpe, CcpVector, GameStructure, PayoffDesign, SolveOptions,
};
use crate::error::{invalid, Error, Result};
use crate::kernels::transition_matrix;
use crate::simulate::steady_state;
use crate::state_model::{EntryExitGame, GameConfig, StateSpace, Theta};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Wrt {
    Sigma,
    Theta,
}

/// Central-difference Jacobian of the free coordinates of Ψ(θ, σ).
///
/// Columns are free σ coordinates (`wrt = Sigma`, step `fd_step`, shrunk
/// near the boundary) or θ entries (`wrt = Theta`, step
/// `fd_step·max(|θ_c|, 1)`).
pub fn jacobian_psi(
    s: &GameStructure,
    design: &PayoffDesign,
    theta: &[f64],
    sigma: &CcpVector,
    wrt: Wrt,
    fd_step: f64,
) -> Result<DMatrix<f64>> {
    if !(fd_step > 0.0) {
        return invalid("finite-difference step must be positive");
    }
    let (n, jn, kn) = (s.n_players(), s.n_choices(), s.n_states());
    let free = sigma.free();
    let rows = free.len();
    let cols = match wrt {
        Wrt::Sigma => rows,
        Wrt::Theta => theta.len(),
    };
    let base_pay = design.evaluate(theta)?;
    let columns: Vec<Vec<f64>> = (0..cols)
        .into_par_iter()
        .map(|c| -> Result<Vec<f64>> {
            let (plus, minus, width) = match wrt {
                Wrt::Sigma => {
                    // room left on the simplex for this coordinate
                    let (i, rest) = (c / ((jn - 1) * kn), c % ((jn - 1) * kn));
                    let k = rest % kn;
                    let p0 = sigma.get(i, 0, k);
                    let h = fd_step.min(0.5 * free[c]).min(0.5 * p0);
                    let mut a = free.clone();
                    let mut b = free.clone();
                    a[c] += h;
                    b[c] -= h;
                    let sa = CcpVector::from_free(n, jn, kn, &a)?;
                    let sb = CcpVector::from_free(n, jn, kn, &b)?;
                    (
                        psi_map(s, &base_pay, &sa)?,
                        psi_map(s, &base_pay, &sb)?,
                        a[c] - b[c],
                    )
                }
                Wrt::Theta => {
                    let h = fd_step * theta[c].abs().max(1.0);
                    let mut a = theta.to_vec();
                    let mut b = theta.to_vec();
                    a[c] += h;
                    b[c] -= h;
                    let pa = design.evaluate(&a)?;
                    let pb = design.evaluate(&b)?;
                    (
                        psi_map(s, &pa, sigma)?,
                        psi_map(s, &pb, sigma)?,
                        a[c] - b[c],
                    )
                }
            };
            Ok(plus
                .free()
                .iter()
                .zip(minus.free())
                .map(|(x, y)| (x - y) / width)
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(rows, cols, |r, c| columns[c][r]))
}

/// Maps free-coordinate changes to full CCP changes: `+1` on choice `j ≥ 1`,
/// `−1` on choice 0. Only two-choice games are supported here.
fn free_to_full(n: usize, kn: usize) -> DMatrix<f64> {
    let mut e = DMatrix::zeros(n * 2 * kn, n * kn);
    for i in 0..n {
        for k in 0..kn {
            e[(i * 2 * kn + k, i * kn + k)] = -1.0;
            e[((i * 2 + 1) * kn + k, i * kn + k)] = 1.0;
        }
    }
    e
}

/// The matrices behind the local convergence condition of the NPL mapping.
#[derive(Debug, Clone)]
pub struct StabilityObjects {
    /// For every row `(i, j, k)` of A, the column `k·K + l(i, j, k)` holding its 1.
    pub a_columns: Vec<usize>,
    /// `A diag(P*)⁻¹ A′`.
    pub delta_sigma: DMatrix<f64>,
    /// `∇_θ Ψ` in full coordinates.
    pub psi_theta: DMatrix<f64>,
    /// `I − Ψ_θ (Ψ_θ′ Δσ Ψ_θ)⁻¹ Ψ_θ′ Δσ`.
    pub m_psi_theta: DMatrix<f64>,
}

impl StabilityObjects {
    /// Dense A (N·J·K × K²); for tests and small games.
    pub fn a_matrix(&self, n_states: usize) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.a_columns.len(), n_states * n_states);
        for (r, &c) in self.a_columns.iter().enumerate() {
            a[(r, c)] = 1.0;
        }
        a
    }

    /// `‖M² − M‖∞` (max abs entry).
    pub fn idempotency_error(&self) -> f64 {
        (&self.m_psi_theta * &self.m_psi_theta - &self.m_psi_theta).amax()
    }

    /// `‖M Ψ_θ‖∞` (max abs entry).
    pub fn annihilation_error(&self) -> f64 {
        (&self.m_psi_theta * &self.psi_theta).amax()
    }
}

/// Builds A, Δσ and M_Ψθ at `(θ, σ)` with `P* = P(Δ; Ψ(θ, σ))`.
pub fn stability_objects(
    s: &GameStructure,
    design: &PayoffDesign,
    theta: &[f64],
    sigma: &CcpVector,
    delta: f64,
    fd_step: f64,
) -> Result<StabilityObjects> {
    if s.n_choices() != 2 {
        return invalid("stability objects are implemented for two-choice games");
    }
    let (n, jn, kn) = (s.n_players(), s.n_choices(), s.n_states());
    let tilde = psi_map(s, &design.evaluate(theta)?, sigma)?;
    let p = transition_matrix(&aggregate_generator(s, &tilde)?, delta)?;

    let mut a_columns = Vec::with_capacity(n * jn * kn);
    for i in 0..n {
        for j in 0..jn {
            for k in 0..kn {
                a_columns.push(k * kn + s.continuation(i, j, k));
            }
        }
    }
    let rows = a_columns.len();
    let mut delta_sigma = DMatrix::zeros(rows, rows);
    for r in 0..rows {
        for c in 0..rows {
            if a_columns[r] == a_columns[c] {
                let idx = a_columns[r];
                let pv = p.get(idx / kn, idx % kn);
                if !(pv > 0.0) {
                    return Err(Error::Numeric(format!(
                        "transition probability {} -> {} is zero; the chain is not irreducible",
                        idx / kn,
                        idx % kn
                    )));
                }
                delta_sigma[(r, c)] = 1.0 / pv;
            }
        }
    }

    let psi_theta =
        free_to_full(n, kn) * jacobian_psi(s, design, theta, sigma, Wrt::Theta, fd_step)?;
    let gram = psi_theta.transpose() * &delta_sigma * &psi_theta;
    let dim = gram.nrows();
    let inv = gram
        .clone()
        .try_inverse()
        .filter(|m| m.iter().all(|v| v.is_finite()));
    let Some(inv) = inv else {
        let rank = gram.rank(1e-10 * gram.amax().max(1e-300));
        return Err(Error::Numeric(format!(
            "Ψθ′ΔσΨθ is singular (rank {rank} of {dim})"
        )));
    };
    let m_psi_theta =
        DMatrix::identity(rows, rows) - &psi_theta * inv * psi_theta.transpose() * &delta_sigma;
    Ok(StabilityObjects {
        a_columns,
        delta_sigma,
        psi_theta,
        m_psi_theta,
    })
}

/// Settings for the iterative spectral-radius estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerOptions {
    pub restarts: usize,
    /// Change in the estimate between iterations; relative above 1,
    /// absolute below.
    pub tol: f64,
    pub max_iter: usize,
    /// Subspace dimension; >1 resolves complex and tied dominant eigenvalues.
    pub block: usize,
    pub seed: u64,
}

impl Default for PowerOptions {
    fn default() -> Self {
        Self {
            restarts: 20,
            tol: 1e-10,
            max_iter: 5000,
            block: 8,
            seed: 0x5eed,
        }
    }
}

fn ritz_radius(h: &DMatrix<f64>) -> f64 {
    dense_radius(h).unwrap_or_else(|| h.amax())
}

/// `max |λ|` from a Schur decomposition; `None` if it fails to converge.
pub fn dense_radius(m: &DMatrix<f64>) -> Option<f64> {
    if m.nrows() == 0 {
        return Some(0.0);
    }
    let schur = Schur::try_new(m.clone(), f64::EPSILON, 100_000)?;
    let eig = schur.complex_eigenvalues();
    Some(eig.iter().map(|z| z.norm()).fold(0.0, f64::max))
}

/// Block power iteration with Rayleigh–Ritz extraction, restarted from
/// random subspaces; returns the largest converged estimate.
pub fn power_radius(m: &DMatrix<f64>, opts: &PowerOptions) -> f64 {
    let n = m.nrows();
    if n == 0 || m.amax() == 0.0 {
        return 0.0;
    }
    let b = opts.block.clamp(1, n);
    let mut best: f64 = 0.0;
    for r in 0..opts.restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(r as u64);
        let start = DMatrix::from_fn(n, b, |_, _| rng.random::<f64>() - 0.5);
        let mut q = start.qr().q();
        let mut prev = f64::NAN;
        let mut stable = 0;
        let mut est = 0.0;
        for _ in 0..opts.max_iter {
            let z = m * &q;
            if z.amax() == 0.0 {
                est = 0.0;
                break;
            }
            let h = q.transpose() * &z;
            est = ritz_radius(&h);
            q = z.qr().q();
            if (est - prev).abs() <= opts.tol * est.max(1.0) {
                stable += 1;
                if stable >= 3 {
                    break;
                }
            } else {
                stable = 0;
            }
            prev = est;
        }
        best = best.max(est);
    }
    best
}

/// Spectral-radius estimate with its dense cross-check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralEstimate {
    pub power: f64,
    /// Schur-based value; computed for dimensions up to [`DENSE_LIMIT`].
    pub dense: Option<f64>,
}

impl SpectralEstimate {
    /// Dense value when available, otherwise the power estimate.
    pub fn value(&self) -> f64 {
        self.dense.unwrap_or(self.power)
    }

    pub fn relative_gap(&self) -> Option<f64> {
        self.dense.map(|d| (d - self.power).abs() / d.max(1e-300))
    }
}

pub const DENSE_LIMIT: usize = 2000;

pub fn spectral_estimate(m: &DMatrix<f64>, opts: &PowerOptions) -> Result<SpectralEstimate> {
    if !m.is_square() {
        return invalid("spectral radius needs a square matrix");
    }
    let power = power_radius(m, opts);
    let dense = if m.nrows() <= DENSE_LIMIT {
        dense_radius(m)
    } else {
        None
    };
    let est = SpectralEstimate { power, dense };
    if let Some(g) = est.relative_gap() {
        if g > 1e-8 && est.value() > 1e-6 {
            log::warn!(
                "power iteration ({power:.12}) and dense eigenvalues ({:.12}) disagree",
                est.value()
            );
        }
    }
    Ok(est)
}

/// `max |λ(m)|`.
pub fn spectral_radius(m: &DMatrix<f64>) -> Result<f64> {
    Ok(spectral_estimate(m, &PowerOptions::default())?.value())
}

/// Local stability of equilibrium iteration and of the NPL mapping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub rho_psi_sigma: f64,
    pub rho_m_psi_theta_psi_sigma: f64,
    pub jacobian_rows: usize,
    pub jacobian_cols: usize,
    pub fd_step: f64,
    pub idempotency_error: f64,
    pub annihilation_error: f64,
    /// `‖M‖∞‖Ψσ‖∞`, an upper bound on `ρ(M Ψσ)`.
    pub norm_bound: f64,
    pub power_dense_gap: Option<f64>,
}

fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn stability_report(
    s: &GameStructure,
    design: &PayoffDesign,
    theta: &[f64],
    sigma: &CcpVector,
    delta: f64,
    fd_step: f64,
) -> Result<StabilityReport> {
    let (n, kn) = (s.n_players(), s.n_states());
    let f = jacobian_psi(s, design, theta, sigma, Wrt::Sigma, fd_step)?;
    let obj = stability_objects(s, design, theta, sigma, delta, fd_step)?;
    let e = free_to_full(n, kn);
    let sel = DMatrix::from_fn(n * kn, n * 2 * kn, |r, c| {
        if c == (r / kn * 2 + 1) * kn + r % kn {
            1.0
        } else {
            0.0
        }
    });
    // NPL map on free coordinates: select(M · E · F)
    let composed = &sel * &obj.m_psi_theta * &e * &f;
    let opts = PowerOptions::default();
    let r1 = spectral_estimate(&f, &opts)?;
    let r2 = spectral_estimate(&composed, &opts)?;
    let bound = inf_norm(&(&sel * &obj.m_psi_theta * &e)) * inf_norm(&f);
    if r2.value() > bound * (1.0 + 1e-8) + 1e-12 {
        log::warn!("ρ(MΨσ) = {} exceeds the norm bound {bound}", r2.value());
    }
    let gap = match (r1.relative_gap(), r2.relative_gap()) {
        (Some(a), Some(b)) => Some(a.max(b)),
        (a, b) => a.or(b),
    };
    Ok(StabilityReport {
        rho_psi_sigma: r1.value(),
        rho_m_psi_theta_psi_sigma: r2.value(),
        jacobian_rows: f.nrows(),
        jacobian_cols: f.ncols(),
        fd_step,
        idempotency_error: obj.idempotency_error(),
        annihilation_error: obj.annihilation_error(),
        norm_bound: bound,
        power_dense_gap: gap,
    })
}

/// One row of [`stability_sweep`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub theta_rn: f64,
    pub rho_psi_sigma: Option<f64>,
    pub avg_active: Option<f64>,
    pub mpe_iterations: Option<usize>,
    pub damping: Option<f64>,
    pub error: Option<String>,
}

fn average_active(space: &StateSpace, pi: &DVector<f64>) -> f64 {
    (0..space.n_states())
        .map(|k| pi[k] * space.active_count(k) as f64)
        .sum()
}

/// Solves the game at each θ_RN in `grid` (other parameters from `theta`)
/// and reports ρ(Ψσ) at the equilibrium and the steady-state number of
/// active firms. Failures are recorded per row.
pub fn stability_sweep(
    config: &GameConfig,
    theta: &Theta,
    grid: &[f64],
    solve: &SolveOptions,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return invalid("sweep grid is empty");
    }
    let game = EntryExitGame::new(config.clone())?;
    theta.validate(config.n_players)?;
    let rows = grid
        .par_iter()
        .map(|&rn| {
            let th = Theta {
                rn,
                ..theta.clone()
            };
            let run = || -> Result<SweepRow> {
                let pay = game.payoffs(&th)?;
                let s = game.structure();
                let init = CcpVector::uniform(config.n_players, 2, game.n_states());
                let sol = solve_mpe(s, &pay, &init, solve)?;
                let f = jacobian_psi(
                    s,
                    game.payoff_design(),
                    &th.to_vec(),
                    &sol.sigma,
                    Wrt::Sigma,
                    FD_STEP,
                )?;
                let rho = spectral_estimate(&f, &PowerOptions::default())?.value();
                let pi = steady_state(s, &sol.sigma)?;
                Ok(SweepRow {
                    theta_rn: rn,
                    rho_psi_sigma: Some(rho),
                    avg_active: Some(average_active(game.space(), &pi)),
                    mpe_iterations: Some(sol.iterations),
                    damping: Some(sol.damping),
                    error: None,
                })
            };
            run().unwrap_or_else(|e| SweepRow {
                theta_rn: rn,
                rho_psi_sigma: None,
                avg_active: None,
                mpe_iterations: None,
                damping: None,
                error: Some(e.to_string()),
            })
        })
        .collect();
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

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
    fn spectral_radius_examples() {
        assert_relative_eq!(
            spectral_radius(&DMatrix::identity(4, 4)).unwrap(),
            1.0,
            epsilon = 1e-12
        );
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![0.3, -0.6]));
        assert_relative_eq!(spectral_radius(&d).unwrap(), 0.6, epsilon = 1e-12);
        let rot = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        assert_relative_eq!(spectral_radius(&rot).unwrap(), 1.0, epsilon = 1e-12);
        assert_eq!(spectral_radius(&DMatrix::zeros(3, 3)).unwrap(), 0.0);
        assert!(spectral_radius(&DMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn power_iteration_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [2usize, 5, 30, 80] {
            let m = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
            let est = spectral_estimate(&m, &PowerOptions::default()).unwrap();
            assert!(est.relative_gap().unwrap() < 1e-8, "n={n}: {est:?}");
        }
        let rot = DMatrix::from_row_slice(3, 3, &[0.0, 2.0, 0.0, -2.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_relative_eq!(
            power_radius(&rot, &PowerOptions::default()),
            2.0,
            epsilon = 1e-9
        );
    }

    #[test]
    fn single_agent_jacobian_vanishes() {
        for levels in [1usize, 5] {
            let g = EntryExitGame::new(config(1, levels)).unwrap();
            let th = Theta {
                fc: vec![-1.7],
                rs: 1.0,
                rn: 0.0,
                ec: 1.0,
            };
            let sig = solved(&g, &th);
            let j = jacobian_psi(
                g.structure(),
                g.payoff_design(),
                &th.to_vec(),
                &sig,
                Wrt::Sigma,
                FD_STEP,
            )
            .unwrap();
            assert_eq!(j.shape(), (2 * levels, 2 * levels));
            assert!(j.amax() < 1e-5, "levels {levels}: {}", j.amax());
        }
    }

    #[test]
    fn no_competition_jacobian_vanishes() {
        let g = EntryExitGame::new(config(3, 3)).unwrap();
        let th = Theta {
            fc: vec![-1.9, -1.8, -1.7],
            rs: 1.0,
            rn: 0.0,
            ec: 1.0,
        };
        let sig = solved(&g, &th);
        let j = jacobian_psi(
            g.structure(),
            g.payoff_design(),
            &th.to_vec(),
            &sig,
            Wrt::Sigma,
            FD_STEP,
        )
        .unwrap();
        assert!(j.amax() < 1e-5);
    }

    #[test]
    fn jacobian_step_halving_is_second_order() {
        let g = EntryExitGame::new(config(2, 2)).unwrap();
        let th = Theta {
            fc: vec![-1.9, -1.8],
            rs: 1.0,
            rn: 1.5,
            ec: 1.0,
        };
        let sig = solved(&g, &th);
        let (s, d, x) = (g.structure(), g.payoff_design(), th.to_vec());
        let j = |h| jacobian_psi(s, d, &x, &sig, Wrt::Sigma, h).unwrap();
        // Richardson reference removes the h² term
        let (a, b) = (j(0.02), j(0.01));
        let reference = (&b * 4.0 - &a) / 3.0;
        let (ea, eb) = ((&a - &reference).amax(), (&b - &reference).amax());
        let ratio = ea / eb;
        assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
        assert_eq!(
            jacobian_psi(s, d, &x, &sig, Wrt::Theta, FD_STEP)
                .unwrap()
                .shape(),
            (16, 5)
        );
    }

    #[test]
    fn stability_object_identities() {
        let g = EntryExitGame::new(config(2, 3)).unwrap();
        let th = Theta {
            fc: vec![-1.9, -1.8],
            rs: 1.0,
            rn: 1.0,
            ec: 1.0,
        };
        let sig = solved(&g, &th);
        let obj = stability_objects(
            g.structure(),
            g.payoff_design(),
            &th.to_vec(),
            &sig,
            1.0,
            FD_STEP,
        )
        .unwrap();
        let a = obj.a_matrix(12);
        assert_eq!(a.shape(), (48, 144));
        for r in 0..48 {
            assert_eq!(a.row(r).sum(), 1.0);
            assert!(a.row(r).iter().all(|&v| v == 0.0 || v == 1.0));
        }
        assert!(
            obj.idempotency_error() < 1e-8,
            "{}",
            obj.idempotency_error()
        );
        assert!(
            obj.annihilation_error() < 1e-8,
            "{}",
            obj.annihilation_error()
        );

        let rep = stability_report(
            g.structure(),
            g.payoff_design(),
            &th.to_vec(),
            &sig,
            1.0,
            FD_STEP,
        )
        .unwrap();
        assert!(rep.rho_psi_sigma >= 0.0 && rep.rho_m_psi_theta_psi_sigma >= 0.0);
        assert!(rep.rho_m_psi_theta_psi_sigma <= rep.norm_bound + 1e-9);
        assert!(rep.power_dense_gap.unwrap() < 1e-8);
    }

    #[test]
    fn sweep_reports_zero_without_competition() {
        let th = Theta {
            fc: vec![-1.9, -1.8, -1.7],
            rs: 1.0,
            rn: 0.0,
            ec: 1.0,
        };
        let rows = stability_sweep(
            &config(3, 3),
            &th,
            &[0.0, 1.0, 2.0],
            &SolveOptions::default(),
        )
        .unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows[0].rho_psi_sigma.unwrap() < 1e-4);
        assert!(rows.iter().all(|r| r.error.is_none()));
        assert!(rows[1].rho_psi_sigma.unwrap() > rows[0].rho_psi_sigma.unwrap());
        assert!(stability_sweep(&config(3, 3), &th, &[], &SolveOptions::default()).is_err());
    }
}
