//! Box-constrained convex QP: minimize `0.5 x'Qx + p'x` subject to
//! `lower <= x <= upper`, solved by projected Newton, plus the active-set
//! implicit differentiation used by the solver backward passes.
//!
//! Infinite bounds are allowed so the unconstrained case rides the same
//! code path.

use crate::core::{CoreError, PdFactor};
use nalgebra::{DMatrix, DVector};
use std::fmt;

const FREE_GRAD_TOL: f64 = 1e-8;
const STEP_TOL: f64 = 1e-10;
const MAX_ITERS: usize = 100;
const ARMIJO_DECAY: f64 = 0.5;
const ARMIJO_ACCEPT: f64 = 0.1;
const MAX_BACKTRACKS: usize = 25;

#[derive(Debug, Clone)]
pub struct BoxQp {
    pub quad: DMatrix<f64>,
    pub lin: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl BoxQp {
    /// Validates shapes and bound ordering; symmetrizes the quadratic term.
    pub fn new(
        quad: DMatrix<f64>,
        lin: DVector<f64>,
        lower: DVector<f64>,
        upper: DVector<f64>,
    ) -> Result<Self, CoreError> {
        let k = lin.len();
        if quad.shape() != (k, k) {
            return Err(CoreError::ShapeMismatch(format!(
                "quad: expected {k}x{k}, got {}x{}",
                quad.nrows(),
                quad.ncols()
            )));
        }
        if lower.len() != k || upper.len() != k {
            return Err(CoreError::ShapeMismatch(format!(
                "bounds: expected length {k}, got {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        if (0..k).any(|i| lower[i] > upper[i]) {
            return Err(CoreError::InvalidDims(
                "lower bound exceeds upper bound".to_string(),
            ));
        }
        let quad_t = quad.transpose();
        Ok(BoxQp { quad: (quad + quad_t) * 0.5, lin, lower, upper })
    }

    fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.quad * x)) + self.lin.dot(x)
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.quad * x + &self.lin
    }

    fn clip(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(x.len(), |i, _| x[i].clamp(self.lower[i], self.upper[i]))
    }
}

#[derive(Debug, Clone)]
pub struct BoxQpSolution {
    pub x: DVector<f64>,
    /// True where `x[i]` sits exactly on a bound with the gradient pushing
    /// outward; a coordinate at a bound with exactly zero gradient counts as
    /// free (the least-restricted differential problem).
    pub clamped: Vec<bool>,
    /// Indices of the free coordinates, ascending.
    pub free_idx: Vec<usize>,
    /// Factorization of the free-free block of `quad`; `None` when
    /// everything is clamped.
    pub free_fac: Option<PdFactor>,
    pub iters: usize,
    /// Infinity norm of the free-coordinate gradient at the solution.
    pub residual: f64,
}

#[derive(Debug, Clone)]
pub enum BoxQpError {
    /// Projected Newton did not meet tolerance within the iteration cap.
    IterationCap { last_x: DVector<f64>, residual: f64 },
    NotPositiveDefinite,
}

impl fmt::Display for BoxQpError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BoxQpError::IterationCap { residual, .. } => {
                write!(f, "projected Newton hit the iteration cap (residual {residual:.3e})")
            }
            BoxQpError::NotPositiveDefinite => {
                write!(f, "free-set block is not positive definite")
            }
        }
    }
}

impl std::error::Error for BoxQpError {}

fn gather(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

fn gather_sq(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |i, j| m[(idx[i], idx[j])])
}

/// Detect the clamped set at `x`: at a bound with the gradient pointing
/// outward (strictly positive at the lower bound, strictly negative at the
/// upper bound).
fn clamped_set(qp: &BoxQp, x: &DVector<f64>, g: &DVector<f64>) -> Vec<bool> {
    (0..x.len())
        .map(|i| (x[i] <= qp.lower[i] && g[i] > 0.0) || (x[i] >= qp.upper[i] && g[i] < 0.0))
        .collect()
}

/// Projected-Newton solve from a warm start (clipped into the bounds).
pub fn boxqp_solve(qp: &BoxQp, x_warm: &DVector<f64>) -> Result<BoxQpSolution, BoxQpError> {
    let k = qp.lin.len();
    let mut x = qp.clip(x_warm);
    let mut iters = 0;

    loop {
        iters += 1;
        let g = qp.gradient(&x);
        let clamped = clamped_set(qp, &x, &g);
        let free_idx: Vec<usize> = (0..k).filter(|&i| !clamped[i]).collect();

        if free_idx.is_empty() {
            // every coordinate pinned with outward gradient: KKT point
            return Ok(BoxQpSolution { x, clamped, free_idx, free_fac: None, iters, residual: 0.0 });
        }
        let gf = gather(&g, &free_idx);
        let residual = gf.abs().max();
        let fac = PdFactor::new(&gather_sq(&qp.quad, &free_idx))
            .map_err(|_| BoxQpError::NotPositiveDefinite)?;
        if residual <= FREE_GRAD_TOL {
            return Ok(BoxQpSolution {
                x,
                clamped,
                free_idx,
                free_fac: Some(fac),
                iters,
                residual,
            });
        }

        // Newton direction on the free set, zero on the clamped set.
        let step_f = -fac.solve_vec(&gf);
        let mut dir = DVector::zeros(k);
        for (pos, &i) in free_idx.iter().enumerate() {
            dir[i] = step_f[pos];
        }

        let f0 = qp.objective(&x);
        let mut alpha = 1.0;
        let mut x_next = x.clone();
        for _ in 0..MAX_BACKTRACKS {
            x_next = qp.clip(&(&x + &dir * alpha));
            let fn_ = qp.objective(&x_next);
            if fn_ <= f0 + ARMIJO_ACCEPT * g.dot(&(&x_next - &x)) {
                break;
            }
            alpha *= ARMIJO_DECAY;
        }
        let moved = (&x_next - &x).abs().max();
        x = x_next;
        if moved <= STEP_TOL {
            // converged by step size: report the state at the new point
            let g = qp.gradient(&x);
            let clamped = clamped_set(qp, &x, &g);
            let free_idx: Vec<usize> = (0..k).filter(|&i| !clamped[i]).collect();
            let residual = if free_idx.is_empty() {
                0.0
            } else {
                gather(&g, &free_idx).abs().max()
            };
            let free_fac = if free_idx.is_empty() {
                None
            } else {
                Some(
                    PdFactor::new(&gather_sq(&qp.quad, &free_idx))
                        .map_err(|_| BoxQpError::NotPositiveDefinite)?,
                )
            };
            return Ok(BoxQpSolution { x, clamped, free_idx, free_fac, iters, residual });
        }
        if iters >= MAX_ITERS {
            let g = qp.gradient(&x);
            let clamped = clamped_set(qp, &x, &g);
            let free_idx: Vec<usize> = (0..k).filter(|&i| !clamped[i]).collect();
            let residual = if free_idx.is_empty() {
                0.0
            } else {
                gather(&g, &free_idx).abs().max()
            };
            if residual <= FREE_GRAD_TOL {
                let free_fac = if free_idx.is_empty() {
                    None
                } else {
                    Some(
                        PdFactor::new(&gather_sq(&qp.quad, &free_idx))
                            .map_err(|_| BoxQpError::NotPositiveDefinite)?,
                    )
                };
                return Ok(BoxQpSolution { x, clamped, free_idx, free_fac, iters, residual });
            }
            return Err(BoxQpError::IterationCap { last_x: x, residual });
        }
    }
}

/// Active-set implicit differentiation: given `grad_x = d loss / d x_star`,
/// the differential solution is zero on clamped coordinates and
/// `-Q_ff^{-1} grad_f` on free ones; the returned gradients are
/// `d loss / d quad = 0.5 (d x_star' + x_star d')` and `d loss / d lin = d`.
pub fn boxqp_backward(
    qp: &BoxQp,
    sol: &BoxQpSolution,
    grad_x: &DVector<f64>,
) -> (DMatrix<f64>, DVector<f64>) {
    let k = qp.lin.len();
    let mut d = DVector::zeros(k);
    if let Some(fac) = &sol.free_fac {
        let gf = gather(grad_x, &sol.free_idx);
        let df = -fac.solve_vec(&gf);
        for (pos, &i) in sol.free_idx.iter().enumerate() {
            d[i] = df[pos];
        }
    }
    let outer = &d * sol.x.transpose();
    let d_quad = (&outer + outer.transpose()) * 0.5;
    (d_quad, d)
}
