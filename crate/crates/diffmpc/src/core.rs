//! Shared problem/trajectory data types and the dense positive-definite
//! linear-algebra plumbing used by every solver in this crate.
//!
//! Conventions fixed here, once, for the whole crate:
//! - joint vectors are `tau = [state; control]`, state block first;
//! - everything is `f64` — the implicit-differentiation residual targets
//!   are far too tight for single precision;
//! - matrices are dense (`nalgebra`); the horizons and dimensions this
//!   library targets are tiny, and the Riccati recursion itself is the
//!   structured sparse solve.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use std::fmt;

/// Problem dimensions: state size, control size, horizon length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n_state: usize,
    pub n_ctrl: usize,
    pub horizon: usize,
}

impl Dims {
    pub fn new(n_state: usize, n_ctrl: usize, horizon: usize) -> Result<Self, CoreError> {
        if n_state == 0 || n_ctrl == 0 || horizon == 0 {
            return Err(CoreError::InvalidDims(format!(
                "n_state, n_ctrl, horizon must all be >= 1 (got {n_state}, {n_ctrl}, {horizon})"
            )));
        }
        Ok(Dims { n_state, n_ctrl, horizon })
    }

    /// Length of a joint state-control vector.
    pub fn n_tau(&self) -> usize {
        self.n_state + self.n_ctrl
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    InvalidDims(String),
    ShapeMismatch(String),
    /// Cholesky factorization failed; the caller may regularize and retry.
    NotPositiveDefinite,
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::InvalidDims(s) => write!(f, "invalid dimensions: {s}"),
            CoreError::ShapeMismatch(s) => write!(f, "shape mismatch: {s}"),
            CoreError::NotPositiveDefinite => {
                write!(f, "matrix is not positive definite (factorization failed)")
            }
        }
    }
}

impl std::error::Error for CoreError {}

/// Concatenate a state and a control into a joint vector, state block first.
pub fn assemble_tau(x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let mut tau = DVector::zeros(x.len() + u.len());
    tau.rows_mut(0, x.len()).copy_from(x);
    tau.rows_mut(x.len(), u.len()).copy_from(u);
    tau
}

/// Split a joint vector back into its (state, control) blocks.
pub fn split_tau(tau: &DVector<f64>, n_state: usize) -> (DVector<f64>, DVector<f64>) {
    let x = tau.rows(0, n_state).into_owned();
    let u = tau.rows(n_state, tau.len() - n_state).into_owned();
    (x, u)
}

/// Time-indexed quadratic cost and affine dynamics with an initial state:
/// per step the cost is `0.5 tau' Q tau + q' tau` with `Q = cost_quad[t]`,
/// `q = cost_lin[t]`, and for `t < horizon-1` the next state is
/// `dyn_mat[t] * tau + dyn_off[t]`.  The final-step dynamics entries are
/// stored for shape uniformity but never read by the recursion.
#[derive(Debug, Clone)]
pub struct LqrProblem {
    pub dims: Dims,
    pub cost_quad: Vec<DMatrix<f64>>,
    pub cost_lin: Vec<DVector<f64>>,
    pub dyn_mat: Vec<DMatrix<f64>>,
    pub dyn_off: Vec<DVector<f64>>,
    pub x_init: DVector<f64>,
}

impl LqrProblem {
    /// Validates shapes and symmetrizes each quadratic cost term as
    /// `(Q + Q') / 2`.  The derivative formulas emit symmetrized updates, so
    /// accepting an asymmetric cost here would silently break the Riccati
    /// recursion's value-function symmetry.
    pub fn new(
        dims: Dims,
        cost_quad: Vec<DMatrix<f64>>,
        cost_lin: Vec<DVector<f64>>,
        dyn_mat: Vec<DMatrix<f64>>,
        dyn_off: Vec<DVector<f64>>,
        x_init: DVector<f64>,
    ) -> Result<Self, CoreError> {
        let (t, n, ntau) = (dims.horizon, dims.n_state, dims.n_tau());
        let check_len = |name: &str, len: usize| {
            if len != t {
                Err(CoreError::ShapeMismatch(format!(
                    "{name}: expected {t} entries, got {len}"
                )))
            } else {
                Ok(())
            }
        };
        check_len("cost_quad", cost_quad.len())?;
        check_len("cost_lin", cost_lin.len())?;
        check_len("dyn_mat", dyn_mat.len())?;
        check_len("dyn_off", dyn_off.len())?;
        for (i, m) in cost_quad.iter().enumerate() {
            if m.shape() != (ntau, ntau) {
                return Err(CoreError::ShapeMismatch(format!(
                    "cost_quad[{i}]: expected {ntau}x{ntau}, got {}x{}",
                    m.nrows(),
                    m.ncols()
                )));
            }
        }
        for (i, v) in cost_lin.iter().enumerate() {
            if v.len() != ntau {
                return Err(CoreError::ShapeMismatch(format!(
                    "cost_lin[{i}]: expected length {ntau}, got {}",
                    v.len()
                )));
            }
        }
        for (i, m) in dyn_mat.iter().enumerate() {
            if m.shape() != (n, ntau) {
                return Err(CoreError::ShapeMismatch(format!(
                    "dyn_mat[{i}]: expected {n}x{ntau}, got {}x{}",
                    m.nrows(),
                    m.ncols()
                )));
            }
        }
        for (i, v) in dyn_off.iter().enumerate() {
            if v.len() != n {
                return Err(CoreError::ShapeMismatch(format!(
                    "dyn_off[{i}]: expected length {n}, got {}",
                    v.len()
                )));
            }
        }
        if x_init.len() != n {
            return Err(CoreError::ShapeMismatch(format!(
                "x_init: expected length {n}, got {}",
                x_init.len()
            )));
        }
        let cost_quad = cost_quad
            .into_iter()
            .map(|m| {
                let mt = m.transpose();
                (m + mt) * 0.5
            })
            .collect();
        Ok(LqrProblem { dims, cost_quad, cost_lin, dyn_mat, dyn_off, x_init })
    }
}

/// Nominal states and controls, one of each per timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn tau(&self, t: usize) -> DVector<f64> {
        assemble_tau(&self.x[t], &self.u[t])
    }

    pub fn horizon(&self) -> usize {
        self.x.len()
    }
}

/// Dual variables of the dynamics constraints.  `lambda[t]` multiplies the
/// constraint that *defines* `x_t`: `lambda[0]` pairs with `x_0 = x_init`
/// and `lambda[t]` (t >= 1) with `x_t = dyn_mat[t-1] tau_{t-1} + dyn_off[t-1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Duals {
    pub lambda: Vec<DVector<f64>>,
}

impl Duals {
    /// Multiplier of the initial-state constraint; the gradient of the
    /// downstream loss with respect to `x_init` in the differential system.
    pub fn initial(&self) -> &DVector<f64> {
        &self.lambda[0]
    }
}

/// A cached Cholesky factorization of a symmetric positive-definite matrix,
/// exposed so backward passes can reuse forward-pass factorizations.
#[derive(Debug, Clone)]
pub struct PdFactor {
    chol: Cholesky<f64, Dyn>,
}

impl PdFactor {
    pub fn new(a: &DMatrix<f64>) -> Result<Self, CoreError> {
        match Cholesky::new(a.clone()) {
            Some(chol) => Ok(PdFactor { chol }),
            None => Err(CoreError::NotPositiveDefinite),
        }
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }
}

/// One-shot PD solve `A X = B`.  Use [`PdFactor`] directly when the same
/// matrix is solved against more than once.
pub fn solve_pd(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>, CoreError> {
    Ok(PdFactor::new(a)?.solve_mat(b))
}
