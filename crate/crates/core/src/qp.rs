//! Dense strictly convex QP solver (dual active-set, Goldfarb-Idnani).
//!
//! Solves `min 1/2 x'Hx + g'x` subject to `C x >= b`, one constraint per row
//! of `C`. The method starts at the unconstrained minimizer and adds violated
//! constraints one at a time while keeping the iterate dual feasible, so the
//! only KKT residual left during the iteration is primal infeasibility.
//!
//! `H^-1`, `C H^-1` and `C H^-1 C'` depend only on `H` and `C`; an MPC with a
//! fixed model per phase builds them once through [`QpFactor`].

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpOptions {
    /// Feasibility tolerance on `C x - b`.
    pub tol: f64,
    pub max_iterations: usize,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iterations: 1000,
        }
    }
}

/// Pre-computed data for a fixed Hessian and constraint matrix.
#[derive(Debug, Clone)]
pub struct QpFactor {
    h: DMatrix<f64>,
    c: DMatrix<f64>,
    hinv: DMatrix<f64>,
    /// `H^-1 C'`, one column per constraint.
    hinv_ct: DMatrix<f64>,
    /// `C H^-1 C'`.
    gram: DMatrix<f64>,
}

impl QpFactor {
    pub fn new(h: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        let n = h.nrows();
        if h.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "Hessian is {}x{}",
                h.nrows(),
                h.ncols()
            )));
        }
        if c.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "constraint matrix has {} columns, Hessian is {n}x{n}",
                c.ncols()
            )));
        }
        let sym = (&h + h.transpose()) * 0.5;
        let chol = sym.clone().cholesky().ok_or_else(|| {
            Error::InvalidParameter("QP Hessian is not positive definite".into())
        })?;
        let hinv = chol.inverse();
        let hinv_ct = &hinv * c.transpose();
        let gram = &c * &hinv_ct;
        Ok(Self {
            h: sym,
            c,
            hinv,
            hinv_ct,
            gram,
        })
    }

    pub fn dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn num_constraints(&self) -> usize {
        self.c.nrows()
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn constraints(&self) -> &DMatrix<f64> {
        &self.c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Lagrange multiplier per constraint row (zero when inactive).
    pub multipliers: DVector<f64>,
    /// Indices of the active constraints at termination.
    pub active: Vec<usize>,
    /// Number of constraint additions and removals.
    pub iterations: usize,
    /// Worst KKT violation of the returned point.
    pub kkt_residual: f64,
    /// Maximum primal violation after each addition step.
    pub history: Vec<f64>,
    /// False when the iteration limit was reached first.
    pub converged: bool,
}

/// Stationarity, primal feasibility, dual feasibility and complementarity,
/// all in the infinity norm.
pub fn kkt_residual(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    c: &DMatrix<f64>,
    b: &DVector<f64>,
    x: &DVector<f64>,
    lambda: &DVector<f64>,
) -> f64 {
    let stationarity = (h * x + g - c.transpose() * lambda).amax();
    let slack = c * x - b;
    let mut worst = stationarity;
    for i in 0..slack.len() {
        worst = worst
            .max((-slack[i]).max(0.0))
            .max((-lambda[i]).max(0.0))
            .max((lambda[i] * slack[i]).abs());
    }
    worst
}

/// Solves the QP and fails with [`Error::MaxIterations`] if the limit is hit.
pub fn solve(
    factor: &QpFactor,
    g: &DVector<f64>,
    b: &DVector<f64>,
    opts: &QpOptions,
) -> Result<QpSolution> {
    let sol = solve_partial(factor, g, b, opts)?;
    if sol.converged {
        Ok(sol)
    } else {
        Err(Error::MaxIterations(sol.iterations))
    }
}

/// One-shot convenience wrapper that factors `H` and `C` on every call.
pub fn solve_dense(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    c: &DMatrix<f64>,
    b: &DVector<f64>,
    opts: &QpOptions,
) -> Result<QpSolution> {
    let factor = QpFactor::new(h.clone(), c.clone())?;
    solve(&factor, g, b, opts)
}

/// Like [`solve`], but returns the last iterate with `converged = false`
/// instead of an error when the iteration limit is reached.
pub fn solve_partial(
    factor: &QpFactor,
    g: &DVector<f64>,
    b: &DVector<f64>,
    opts: &QpOptions,
) -> Result<QpSolution> {
    let n = factor.dim();
    let m = factor.num_constraints();
    if g.len() != n || b.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "expected g of length {n} and b of length {m}, got {} and {}",
            g.len(),
            b.len()
        )));
    }
    let c = &factor.c;
    let mut x = -(&factor.hinv * g);
    let mut active: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let mut history = Vec::new();
    let mut iterations = 0usize;
    let mut converged = false;

    'outer: while iterations < opts.max_iterations {
        let slack = c * &x - b;
        let (p, worst) = slack
            .iter()
            .enumerate()
            .fold((0usize, f64::INFINITY), |acc, (i, &s)| {
                if s < acc.1 {
                    (i, s)
                } else {
                    acc
                }
            });
        history.push((-worst).max(0.0));
        if m == 0 || worst >= -opts.tol {
            converged = true;
            break;
        }
        let mut u_p = 0.0;
        loop {
            iterations += 1;
            if iterations > opts.max_iterations {
                break 'outer;
            }
            let k = active.len();
            // r = (N' H^-1 N)^-1 N' H^-1 n_p and z = H^-1 n_p - H^-1 N r
            let r = if k == 0 {
                DVector::zeros(0)
            } else {
                let gram_aa = DMatrix::from_fn(k, k, |i, j| factor.gram[(active[i], active[j])]);
                let rhs = DVector::from_fn(k, |i, _| factor.gram[(active[i], p)]);
                match gram_aa.clone().cholesky() {
                    Some(ch) => ch.solve(&rhs),
                    None => gram_aa.lu().solve(&rhs).ok_or_else(|| {
                        Error::InvalidParameter("active constraints became dependent".into())
                    })?,
                }
            };
            let mut z = factor.hinv_ct.column(p).clone_owned();
            for (i, &j) in active.iter().enumerate() {
                z.axpy(-r[i], &factor.hinv_ct.column(j), 1.0);
            }

            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for j in 0..k {
                if r[j] > 0.0 {
                    let ratio = u[j] / r[j];
                    if ratio < t1 {
                        t1 = ratio;
                        drop = Some(j);
                    }
                }
            }
            let n_p = c.row(p);
            let zn = (n_p * &z)[(0, 0)];
            let t2 = if zn <= 1e-10 * factor.gram[(p, p)] {
                f64::INFINITY
            } else {
                (b[p] - (n_p * &x)[(0, 0)]) / zn
            };

            if t1.is_infinite() && t2.is_infinite() {
                return Err(Error::Infeasible);
            }
            if t2.is_infinite() {
                // Dependent direction: shift multipliers and drop a constraint.
                for j in 0..k {
                    u[j] -= t1 * r[j];
                }
                u_p += t1;
                let l = drop.expect("finite partial step has a blocking index");
                active.remove(l);
                u.remove(l);
                continue;
            }
            let t = t1.min(t2);
            x.axpy(t, &z, 1.0);
            for j in 0..k {
                u[j] -= t * r[j];
            }
            u_p += t;
            if t2 <= t1 {
                active.push(p);
                u.push(u_p);
                break;
            }
            let l = drop.expect("partial step has a blocking index");
            active.remove(l);
            u.remove(l);
        }
    }

    let mut multipliers = DVector::zeros(m);
    for (i, &j) in active.iter().enumerate() {
        multipliers[j] = u[i].max(0.0);
    }
    let kkt = kkt_residual(&factor.h, g, c, b, &x, &multipliers);
    Ok(QpSolution {
        x,
        multipliers,
        active,
        iterations,
        kkt_residual: kkt,
        history,
        converged,
    })
}

/// Stacks two-sided bounds `lo <= A x <= hi` into the one-sided form
/// `[A; -A] x >= [lo; -hi]`.
pub fn two_sided(a: &DMatrix<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let (m, n) = a.shape();
    let mut c = DMatrix::zeros(2 * m, n);
    c.rows_mut(0, m).copy_from(a);
    c.rows_mut(m, m).copy_from(&(-a));
    let mut b = DVector::zeros(2 * m);
    b.rows_mut(0, m).copy_from(lo);
    b.rows_mut(m, m).copy_from(&(-hi));
    (c, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn clipped_scalar() {
        // (x - 1)^2 subject to x <= 0.5
        let h = DMatrix::from_element(1, 1, 2.0);
        let g = DVector::from_element(1, -2.0);
        let c = DMatrix::from_element(1, 1, -1.0);
        let b = DVector::from_element(1, -0.5);
        let sol = solve_dense(&h, &g, &c, &b, &QpOptions::default()).unwrap();
        assert_abs_diff_eq!(sol.x[0], 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(sol.multipliers[0], 1.0, epsilon = 1e-12);
        assert!(sol.kkt_residual < 1e-12);
    }

    #[test]
    fn inactive_constraint_keeps_unconstrained_point() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let g = DVector::from_vec(vec![-1.0, 0.3]);
        let c = DMatrix::identity(2, 2);
        let b = DVector::from_element(2, -100.0);
        let sol = solve_dense(&h, &g, &c, &b, &QpOptions::default()).unwrap();
        let x = h.clone().lu().solve(&(-&g)).unwrap();
        assert!((sol.x - x).amax() < 1e-14);
        assert!(sol.active.is_empty());
    }

    #[test]
    fn conflicting_bounds_are_infeasible() {
        let h = DMatrix::identity(1, 1);
        let g = DVector::zeros(1);
        let c = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let b = DVector::from_vec(vec![1.0, 0.0]); // x >= 1 and x <= 0
        assert_eq!(
            solve_dense(&h, &g, &c, &b, &QpOptions::default()),
            Err(Error::Infeasible)
        );
    }

    #[test]
    fn iteration_limit_is_reported() {
        let h = DMatrix::identity(3, 3);
        let g = DVector::from_element(3, 5.0);
        let c = DMatrix::identity(3, 3);
        let b = DVector::zeros(3);
        let opts = QpOptions {
            max_iterations: 1,
            ..QpOptions::default()
        };
        assert!(matches!(
            solve_dense(&h, &g, &c, &b, &opts),
            Err(Error::MaxIterations(_))
        ));
        let f = QpFactor::new(h, c).unwrap();
        let partial = solve_partial(&f, &g, &b, &opts).unwrap();
        assert!(!partial.converged);
    }

    #[test]
    fn duplicate_constraints_do_not_break() {
        let h = DMatrix::identity(2, 2);
        let g = DVector::from_vec(vec![3.0, 3.0]);
        let c = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0]);
        let b = DVector::from_vec(vec![0.0, 0.0, 0.5]);
        let sol = solve_dense(&h, &g, &c, &b, &QpOptions::default()).unwrap();
        assert!(sol.kkt_residual < 1e-10);
        assert_abs_diff_eq!(sol.x[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.x[1], 0.25, epsilon = 1e-12);
    }

    #[test]
    fn two_sided_layout() {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let (c, b) = two_sided(&a, &DVector::from_element(1, -1.0), &DVector::from_element(1, 3.0));
        assert_eq!(c, DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -1.0, -2.0]));
        assert_eq!(b, DVector::from_vec(vec![-1.0, -3.0]));
    }

    #[test]
    fn dimension_errors() {
        let h = DMatrix::identity(2, 2);
        assert!(QpFactor::new(h.clone(), DMatrix::zeros(1, 3)).is_err());
        let f = QpFactor::new(h, DMatrix::zeros(1, 2)).unwrap();
        assert!(solve(&f, &DVector::zeros(3), &DVector::zeros(1), &QpOptions::default()).is_err());
    }
}
