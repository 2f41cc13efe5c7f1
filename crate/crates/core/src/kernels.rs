//! Dense kernels for finite Markov jump processes.
//!
//! Everything here works on `nalgebra` dense matrices; the state spaces in
//! this crate stay below a few hundred states, where dense LU and Padé
//! scaling-and-squaring are both cheap and accurate.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};

/// Intensity matrix of a finite Markov jump process.
///
/// Off-diagonal entries are non-negative rates and every row sums to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator(DMatrix<f64>);

impl Generator {
    /// Validates `m` as an intensity matrix.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return invalid(format!(
                "generator must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            ));
        }
        let k = m.nrows();
        let mut scale: f64 = 1.0;
        for r in 0..k {
            for c in 0..k {
                let v = m[(r, c)];
                if !v.is_finite() {
                    return invalid(format!("generator entry ({r},{c}) is not finite"));
                }
                if r != c && v < 0.0 {
                    return invalid(format!(
                        "generator off-diagonal ({r},{c}) = {v} is negative"
                    ));
                }
                scale = scale.max(v.abs());
            }
        }
        let tol = 1e-12 * (k.max(1) as f64) * scale;
        for r in 0..k {
            let s: f64 = m.row(r).sum();
            if s.abs() > tol {
                return invalid(format!("generator row {r} sums to {s:e}"));
            }
        }
        Ok(Self(m))
    }

    /// Builds a generator from off-diagonal rates; the diagonal of `rates` is
    /// ignored and replaced by the negative row sum.
    pub fn from_rates(mut rates: DMatrix<f64>) -> Result<Self> {
        if !rates.is_square() {
            return invalid("rate matrix must be square");
        }
        for r in 0..rates.nrows() {
            rates[(r, r)] = 0.0;
            let s: f64 = rates.row(r).sum();
            rates[(r, r)] = -s;
        }
        Self::new(rates)
    }

    pub fn zeros(k: usize) -> Self {
        Self(DMatrix::zeros(k, k))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    /// Total rate of leaving state `k`.
    pub fn exit_rate(&self, k: usize) -> f64 {
        -self.0[(k, k)]
    }

    /// Sum of two generators (itself a generator).
    pub fn add(&self, other: &Generator) -> Result<Generator> {
        if self.dim() != other.dim() {
            return invalid("generator dimensions differ");
        }
        Ok(Generator(&self.0 + &other.0))
    }
}

/// Row-stochastic matrix `P(Δ) = exp(Δ Q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    entries: DMatrix<f64>,
    horizon: f64,
}

impl TransitionMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.entries[(from, to)]
    }
}

// Degree-13 Padé coefficients for exp.
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

// Largest 1-norm for which the [13/13] approximant is accurate to unit roundoff.
const THETA13: f64 = 5.371920351148152;

fn one_norm(a: &DMatrix<f64>) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Matrix exponential by scaling and squaring with a [13/13] Padé approximant.
pub fn expm(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return invalid(format!(
            "expm needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        ));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return invalid("expm input has non-finite entries");
    }
    let n = a.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let norm = one_norm(a);
    if norm == 0.0 {
        return Ok(DMatrix::identity(n, n));
    }
    let s = if norm > THETA13 {
        (norm / THETA13).log2().ceil().max(0.0) as i32
    } else {
        0
    };
    let scaled = a * 2f64.powi(-s);

    let ident = DMatrix::<f64>::identity(n, n);
    let a2 = &scaled * &scaled;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let b = &PADE13;

    let u_inner = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9])
        + &a6 * b[7]
        + &a4 * b[5]
        + &a2 * b[3]
        + &ident * b[1];
    let u = &scaled * u_inner;
    let v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8])
        + &a6 * b[6]
        + &a4 * b[4]
        + &a2 * b[2]
        + &ident * b[0];

    let numer = &v + &u;
    let denom = v - u;
    let mut r = denom
        .lu()
        .solve(&numer)
        .ok_or_else(|| Error::Numeric("Padé denominator is singular".into()))?;
    for _ in 0..s {
        r = &r * &r;
    }
    Ok(r)
}

/// Transition matrix over a horizon `delta`.
///
/// Negative entries below `-1e-10` are a numeric error; smaller ones are
/// clipped and the rows renormalized.
pub fn transition_matrix(q: &Generator, delta: f64) -> Result<TransitionMatrix> {
    if !(delta >= 0.0) || !delta.is_finite() {
        return invalid(format!(
            "horizon must be finite and non-negative, got {delta}"
        ));
    }
    let k = q.dim();
    if delta == 0.0 {
        return Ok(TransitionMatrix {
            entries: DMatrix::identity(k, k),
            horizon: 0.0,
        });
    }
    let mut p = expm(&(q.matrix() * delta))?;
    for r in 0..k {
        let mut sum = 0.0;
        for c in 0..k {
            let v = p[(r, c)];
            if v < -1e-10 {
                return Err(Error::Numeric(format!(
                    "transition probability ({r},{c}) = {v:e} is negative"
                )));
            }
            if v < 0.0 {
                p[(r, c)] = 0.0;
            }
            sum += p[(r, c)];
        }
        if !(sum > 0.0) {
            return Err(Error::Numeric(format!("transition row {r} has zero mass")));
        }
        for c in 0..k {
            p[(r, c)] /= sum;
        }
    }
    Ok(TransitionMatrix {
        entries: p,
        horizon: delta,
    })
}

/// Poisson weights `w_r = e^{-μ} μ^r / r!` until the remaining tail mass
/// drops below `tol`.
fn poisson_weights(mu: f64, tol: f64) -> Vec<f64> {
    let mut weights = Vec::new();
    let mut log_fact = 0.0;
    let mut mass = 0.0;
    let ln_mu = mu.ln();
    let mut r = 0usize;
    loop {
        if r > 0 {
            log_fact += (r as f64).ln();
        }
        let w = (-mu + r as f64 * ln_mu - log_fact).exp();
        weights.push(w);
        mass += w;
        // past the mode the tail is monotone; stop once it is below tol
        if (r as f64) > mu && 1.0 - mass < tol {
            break;
        }
        if r > 100_000 {
            break;
        }
        r += 1;
    }
    weights
}

fn uniformized_jump_matrix(q: &Generator) -> (f64, DMatrix<f64>) {
    let k = q.dim();
    let rate = (0..k).map(|i| q.exit_rate(i)).fold(0.0, f64::max);
    if rate == 0.0 {
        return (0.0, DMatrix::identity(k, k));
    }
    let z = DMatrix::identity(k, k) + q.matrix() / rate;
    (rate, z)
}

/// `P(Δ)[from, to]` evaluated as a Poisson mixture of powers of the
/// uniformized jump matrix. Independent of [`expm`].
pub fn uniformization_probability(
    q: &Generator,
    delta: f64,
    from: usize,
    to: usize,
    truncation_tol: f64,
) -> Result<f64> {
    let k = q.dim();
    if from >= k || to >= k {
        return invalid(format!("state index out of range for K={k}"));
    }
    if !(truncation_tol > 0.0) {
        return invalid("truncation tolerance must be positive");
    }
    if !(delta >= 0.0) {
        return invalid(format!("horizon must be non-negative, got {delta}"));
    }
    let (rate, z) = uniformized_jump_matrix(q);
    if delta == 0.0 || rate == 0.0 {
        return Ok(if from == to { 1.0 } else { 0.0 });
    }
    let weights = poisson_weights(rate * delta, truncation_tol);
    let mut row = DVector::<f64>::zeros(k);
    row[from] = 1.0;
    let zt = z.transpose();
    let mut acc = 0.0;
    for (r, w) in weights.iter().enumerate() {
        if r > 0 {
            row = &zt * &row;
        }
        acc += w * row[to];
    }
    Ok(acc)
}

/// Full transition matrix by uniformization.
pub fn uniformization_matrix(
    q: &Generator,
    delta: f64,
    truncation_tol: f64,
) -> Result<DMatrix<f64>> {
    if !(truncation_tol > 0.0) {
        return invalid("truncation tolerance must be positive");
    }
    if !(delta >= 0.0) {
        return invalid(format!("horizon must be non-negative, got {delta}"));
    }
    let k = q.dim();
    let (rate, z) = uniformized_jump_matrix(q);
    if delta == 0.0 || rate == 0.0 {
        return Ok(DMatrix::identity(k, k));
    }
    let weights = poisson_weights(rate * delta, truncation_tol);
    let mut power = DMatrix::<f64>::identity(k, k);
    let mut acc = DMatrix::<f64>::zeros(k, k);
    for (r, w) in weights.iter().enumerate() {
        if r > 0 {
            power = &power * &z;
        }
        acc += &power * *w;
    }
    Ok(acc)
}

/// Checks strong connectivity of the off-diagonal rate graph.
///
/// Returns `(unreachable, source)` for the first violation found.
pub fn find_unreachable(q: &Generator) -> Option<(usize, usize)> {
    let k = q.dim();
    if k == 0 {
        return None;
    }
    let m = q.matrix();
    let reach = |forward: bool| -> Vec<bool> {
        let mut seen = vec![false; k];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for v in 0..k {
                let rate = if forward { m[(u, v)] } else { m[(v, u)] };
                if v != u && rate > 0.0 && !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen
    };
    let fwd = reach(true);
    if let Some(s) = fwd.iter().position(|&b| !b) {
        return Some((s, 0));
    }
    let bwd = reach(false);
    if let Some(s) = bwd.iter().position(|&b| !b) {
        // 0 is unreachable from s
        return Some((0, s));
    }
    None
}

/// Stationary distribution of an irreducible generator.
///
/// Solves the balance equations with one equation replaced by the
/// normalization constraint.
pub fn stationary_distribution(q: &Generator) -> Result<DVector<f64>> {
    let k = q.dim();
    if k == 0 {
        return invalid("empty generator");
    }
    if let Some((state, from)) = find_unreachable(q) {
        return Err(Error::NotIrreducible { state, from });
    }
    if k == 1 {
        return Ok(DVector::from_element(1, 1.0));
    }
    let mut a = q.matrix().transpose();
    for c in 0..k {
        a[(k - 1, c)] = 1.0;
    }
    let mut rhs = DVector::<f64>::zeros(k);
    rhs[k - 1] = 1.0;
    let lu = a.clone().lu();
    let mut pi = lu
        .solve(&rhs)
        .ok_or_else(|| Error::Numeric("stationary system is singular".into()))?;
    // one step of iterative refinement
    let resid = &rhs - &a * &pi;
    if let Some(corr) = lu.solve(&resid) {
        pi += corr;
    }
    for v in pi.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let total = pi.sum();
    pi /= total;
    Ok(pi)
}

/// Sup norm of `π Q`.
pub fn balance_residual(q: &Generator, pi: &DVector<f64>) -> f64 {
    (q.matrix().transpose() * pi).amax()
}
