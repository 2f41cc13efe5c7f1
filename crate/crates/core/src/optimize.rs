//! BFGS minimization with central finite-difference gradients.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BfgsOptions {
    /// Stop when the gradient sup-norm falls below this.
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Central-difference step is `rel_step · max(|x_i|, 1)`.
    pub rel_step: f64,
    /// A run that can no longer make progress is still accepted when its
    /// gradient sup-norm is below this; otherwise it is an error.
    pub stall_grad_tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            grad_tol: 1e-6,
            max_iter: 500,
            rel_step: 1e-6,
            stall_grad_tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    /// False when the run stopped on a stall with an acceptable gradient.
    pub converged: bool,
}

/// Central-difference gradient; coordinates are evaluated in parallel.
pub fn numerical_gradient<F>(f: &F, x: &[f64], rel_step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    (0..x.len())
        .into_par_iter()
        .map(|i| {
            let h = rel_step * x[i].abs().max(1.0);
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            a[i] += h;
            b[i] -= h;
            // use the realized step to cancel representation error
            (f(&a) - f(&b)) / (a[i] - b[i])
        })
        .collect()
}

fn sup(v: &DVector<f64>) -> f64 {
    v.amax()
}

/// Minimizes `f` from `x0`.
pub fn minimize<F>(f: F, x0: &[f64], opts: &BfgsOptions) -> Result<Minimum>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if x0.is_empty() {
        return invalid("cannot minimize over zero parameters");
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return invalid("starting point must be finite");
    }
    let n = x0.len();
    let mut evals = 0usize;
    let eval = |x: &DVector<f64>, evals: &mut usize| {
        *evals += 1;
        let v = f(x.as_slice());
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let grad = |x: &DVector<f64>, evals: &mut usize| {
        *evals += 2 * n;
        DVector::from_vec(numerical_gradient(&f, x.as_slice(), opts.rel_step))
    };

    let mut x = DVector::from_column_slice(x0);
    let mut fx = eval(&x, &mut evals);
    if !fx.is_finite() {
        return Err(Error::Numeric(
            "objective is not finite at the starting point".into(),
        ));
    }
    let mut g = grad(&x, &mut evals);
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut fresh = true;
    let mut flat = 0;

    for it in 0..opts.max_iter {
        let gn = sup(&g);
        if !gn.is_finite() {
            return Err(Error::Numeric("gradient is not finite".into()));
        }
        if gn < opts.grad_tol {
            return Ok(Minimum {
                x: x.as_slice().to_vec(),
                value: fx,
                grad_norm: gn,
                iterations: it,
                evaluations: evals,
                converged: true,
            });
        }
        let mut d = -(&h * &g);
        let mut slope = g.dot(&d);
        if slope >= 0.0 {
            h = DMatrix::identity(n, n);
            d = -g.clone();
            slope = -g.norm_squared();
        }

        // Armijo backtracking
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xn = &x + &d * alpha;
            let fnew = eval(&xn, &mut evals);
            if fnew <= fx + 1e-4 * alpha * slope {
                accepted = Some((xn, fnew));
                break;
            }
            alpha *= 0.5;
        }
        let Some((xn, fnew)) = accepted else {
            if !fresh {
                // retry once along steepest descent
                h = DMatrix::identity(n, n) / g.norm().max(1.0);
                fresh = true;
                continue;
            }
            return stalled(x, fx, gn, it, evals, opts);
        };

        let gnew = grad(&xn, &mut evals);
        let s = &xn - &x;
        let y = &gnew - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if fresh {
                h = DMatrix::identity(n, n) * (sy / y.norm_squared());
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            // H⁺ = (I − ρsyᵀ)H(I − ρysᵀ) + ρssᵀ
            h = &h - (&hy * s.transpose() + &s * hy.transpose()) * rho
                + &s * s.transpose() * (rho * rho * y.dot(&hy) + rho);
            fresh = false;
        }
        let rel_change = (fx - fnew).abs() / fx.abs().max(1.0);
        flat = if rel_change < 1e-15 { flat + 1 } else { 0 };
        x = xn;
        fx = fnew;
        g = gnew;
        if flat >= 10 {
            return stalled(x, fx, sup(&g), it + 1, evals, opts);
        }
    }
    let gn = sup(&g);
    if gn < opts.grad_tol {
        return Ok(Minimum {
            x: x.as_slice().to_vec(),
            value: fx,
            grad_norm: gn,
            iterations: opts.max_iter,
            evaluations: evals,
            converged: true,
        });
    }
    Err(Error::Optimizer {
        iterations: opts.max_iter,
        grad_norm: gn,
        best_point: x.as_slice().to_vec(),
        best_value: fx,
    })
}

fn stalled(
    x: DVector<f64>,
    fx: f64,
    gn: f64,
    it: usize,
    evals: usize,
    opts: &BfgsOptions,
) -> Result<Minimum> {
    if gn < opts.stall_grad_tol {
        log::debug!("BFGS stalled at gradient {gn:.3e} after {it} iterations; accepting");
        Ok(Minimum {
            x: x.as_slice().to_vec(),
            value: fx,
            grad_norm: gn,
            iterations: it,
            evaluations: evals,
            converged: false,
        })
    } else {
        Err(Error::Optimizer {
            iterations: it,
            grad_norm: gn,
            best_point: x.as_slice().to_vec(),
            best_value: fx,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn quadratic() {
        let f = |x: &[f64]| (x[0] - 1.0).powi(2) + 10.0 * (x[1] + 2.0).powi(2) + x[0] * x[1];
        let m = minimize(f, &[0.0, 0.0], &BfgsOptions::default()).unwrap();
        // ∇ = 0: 2(x−1) + y = 0, 20(y+2) + x = 0
        let y = (-40.0 - 1.0 + 0.0) / (20.0 - 0.5);
        let x = 1.0 - y / 2.0;
        assert_relative_eq!(m.x[0], x, epsilon = 1e-6);
        assert_relative_eq!(m.x[1], y, epsilon = 1e-6);
        assert!(m.converged);
    }

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| 100.0 * (x[1] - x[0] * x[0]).powi(2) + (1.0 - x[0]).powi(2);
        let m = minimize(f, &[-1.2, 1.0], &BfgsOptions::default()).unwrap();
        assert_relative_eq!(m.x[0], 1.0, epsilon = 1e-5);
        assert_relative_eq!(m.x[1], 1.0, epsilon = 1e-5);
        assert!(m.grad_norm < 1e-4);
    }

    #[test]
    fn logistic_likelihood() {
        // smooth, bounded-below objective in eight dimensions
        let data: Vec<(Vec<f64>, f64)> = (0..200)
            .map(|i| {
                let x: Vec<f64> = (0..8)
                    .map(|j| (((i * 7 + j * 13) % 17) as f64 / 8.5) - 1.0)
                    .collect();
                let y = if (i * 31 % 7) < 3 { 1.0 } else { 0.0 };
                (x, y)
            })
            .collect();
        let f = |b: &[f64]| {
            data.iter()
                .map(|(x, y)| {
                    let z: f64 = x.iter().zip(b).map(|(a, c)| a * c).sum();
                    (1.0 + z.exp()).ln() - y * z
                })
                .sum::<f64>()
                / 200.0
        };
        let m = minimize(f, &[1.0; 8], &BfgsOptions::default()).unwrap();
        assert!(m.grad_norm < 1e-6);
    }

    #[test]
    fn iteration_cap_is_an_error_with_best_point() {
        let f = |x: &[f64]| 100.0 * (x[1] - x[0] * x[0]).powi(2) + (1.0 - x[0]).powi(2);
        let opts = BfgsOptions {
            max_iter: 3,
            ..Default::default()
        };
        match minimize(f, &[-1.2, 1.0], &opts) {
            Err(Error::Optimizer {
                iterations,
                best_point,
                grad_norm,
                best_value,
            }) => {
                assert_eq!(iterations, 3);
                assert_eq!(best_point.len(), 2);
                assert!(grad_norm > 0.0 && best_value < 24.2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_start_rejected() {
        assert!(minimize(|x: &[f64]| x[0], &[f64::NAN], &BfgsOptions::default()).is_err());
        assert!(minimize(|_: &[f64]| f64::NAN, &[0.0], &BfgsOptions::default()).is_err());
    }

    #[test]
    fn gradient_is_second_order() {
        let f = |x: &[f64]| x[0].sin() * x[1].exp();
        let g = numerical_gradient(&f, &[0.3, -0.2], 1e-6);
        assert_relative_eq!(g[0], 0.3f64.cos() * (-0.2f64).exp(), epsilon = 1e-9);
        assert_relative_eq!(g[1], 0.3f64.sin() * (-0.2f64).exp(), epsilon = 1e-9);
    }
}
