//! Differentiation through the box-DDP fixed point.
//!
//! At a converged fixed point the solution is characterized by the local
//! quadratic model plus the set of controls pinned at their bounds.  The
//! derivative of a downstream loss with respect to the model data is
//! obtained from one companion problem: the same quadratic cost and dynamics
//! matrices, the linear cost replaced by the loss gradient, offsets and
//! initial state zero, and every pinned control dimension frozen at zero.
//! Gradients with respect to physical parameters then follow by contracting
//! the model-level gradients with the parameter sensitivity of the
//! linearization at the (frozen) fixed trajectory.

use crate::core::{Dims, LqrProblem, PdFactor, Trajectory};
use crate::envs::GoalCost;
use crate::lqr::{duals_with_lin, lqr_duals};
use crate::mpc::{CostModel, DynModel, FixedPoint, MpcProblem, ParamDyn};
use nalgebra::{DMatrix, DVector};
use std::fmt;

/// Step for the central differences over physical dynamics parameters in
/// [`dyn_param_grad`].
const PARAM_FD_STEP: f64 = 1e-6;

/// Gradients of a downstream scalar loss with respect to the fixed point's
/// local model data.  Cost arrays have one entry per timestep; dynamics
/// arrays have `horizon - 1` (no constraint follows the final step).
#[derive(Debug, Clone)]
pub struct MpcGradients {
    pub d_cost_quad: Vec<DMatrix<f64>>,
    pub d_cost_lin: Vec<DVector<f64>>,
    pub d_dyn_mat: Vec<DMatrix<f64>>,
    pub d_dyn_off: Vec<DVector<f64>>,
    pub d_x_init: DVector<f64>,
    /// The differential trajectory (zero on every clamped control dimension);
    /// exposed because imitation losses and diagnostics read it directly.
    pub d_traj: Trajectory,
}

#[derive(Debug, Clone)]
pub enum MpcDiffError {
    /// The fixed point did not converge; its derivative is undefined.
    NotConverged,
    /// The free-free control block failed to factorize at a timestep.
    NotPositiveDefinite { timestep: usize },
    Shape(String),
}

impl fmt::Display for MpcDiffError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MpcDiffError::NotConverged => {
                write!(f, "fixed point is not converged; gradients are undefined")
            }
            MpcDiffError::NotPositiveDefinite { timestep } => write!(
                f,
                "free control block not positive definite at timestep {timestep}"
            ),
            MpcDiffError::Shape(s) => write!(f, "shape mismatch: {s}"),
        }
    }
}

impl std::error::Error for MpcDiffError {}

/// Solve the companion problem with clamped control dimensions frozen at
/// zero: a Riccati recursion whose gains and steps are restricted to the
/// free rows, forward-rolled from a zero initial state with zero offsets.
fn zero_constrained_differential(
    dims: &Dims,
    fp: &FixedPoint,
    grad_tau: &[DVector<f64>],
) -> Result<Trajectory, MpcDiffError> {
    let (n, m, horizon) = (dims.n_state, dims.n_ctrl, dims.horizon);
    let mut gains = vec![DMatrix::<f64>::zeros(m, n); horizon];
    let mut offs = vec![DVector::<f64>::zeros(m); horizon];
    let mut v_quad = DMatrix::<f64>::zeros(n, n);
    let mut v_lin = DVector::<f64>::zeros(n);

    for t in (0..horizon).rev() {
        // differential offsets are zero, so the value offset term vanishes
        let (q_mat, q_vec) = if t == horizon - 1 {
            (fp.cost_quad[t].clone(), grad_tau[t].clone())
        } else {
            let f_t = &fp.dyn_mat[t];
            let ftv = f_t.tr_mul(&v_quad);
            (&fp.cost_quad[t] + &ftv * f_t, &grad_tau[t] + f_t.tr_mul(&v_lin))
        };
        let qxu = q_mat.view_range(0..n, n..n + m).into_owned();
        let qux = q_mat.view_range(n..n + m, 0..n).into_owned();
        let quu = q_mat.view_range(n..n + m, n..n + m).into_owned();
        let qx = q_vec.rows(0, n).into_owned();
        let qu = q_vec.rows(n, m).into_owned();

        let free: Vec<usize> = (0..m).filter(|&i| !fp.clamped[t][i]).collect();
        let mut gain = DMatrix::<f64>::zeros(m, n);
        let mut off = DVector::<f64>::zeros(m);
        if !free.is_empty() {
            let quu_ff =
                DMatrix::from_fn(free.len(), free.len(), |i, j| quu[(free[i], free[j])]);
            let fac = PdFactor::new(&quu_ff)
                .map_err(|_| MpcDiffError::NotPositiveDefinite { timestep: t })?;
            let qux_f = DMatrix::from_fn(free.len(), n, |i, j| qux[(free[i], j)]);
            let qu_f = DVector::from_iterator(free.len(), free.iter().map(|&i| qu[i]));
            let gain_f = -fac.solve_mat(&qux_f);
            let off_f = -fac.solve_vec(&qu_f);
            for (pos, &i) in free.iter().enumerate() {
                for j in 0..n {
                    gain[(i, j)] = gain_f[(pos, j)];
                }
                off[i] = off_f[pos];
            }
        }

        let gain_t_quu = gain.tr_mul(&quu);
        let mut next_quad = q_mat.view_range(0..n, 0..n).into_owned() + &qxu * &gain
            + gain.tr_mul(&qux)
            + &gain_t_quu * &gain;
        next_quad = (&next_quad + next_quad.transpose()) * 0.5;
        v_lin = qx + &qxu * &off + gain.tr_mul(&qu) + &gain_t_quu * &off;
        v_quad = next_quad;
        gains[t] = gain;
        offs[t] = off;
    }

    let mut x = Vec::with_capacity(horizon);
    let mut u = Vec::with_capacity(horizon);
    x.push(DVector::zeros(n));
    for t in 0..horizon {
        let ut = &gains[t] * &x[t] + &offs[t];
        if t < horizon - 1 {
            let tau = crate::core::assemble_tau(&x[t], &ut);
            x.push(&fp.dyn_mat[t] * tau);
        }
        u.push(ut);
    }
    Ok(Trajectory { x, u })
}

/// The fixed point's data in LQR form, dynamics arrays padded to full length
/// (final entries are never read by the dual recursion).
fn fixed_point_as_lqr(dims: &Dims, fp: &FixedPoint) -> Result<LqrProblem, MpcDiffError> {
    let (n, horizon) = (dims.n_state, dims.horizon);
    let mut dyn_mat = fp.dyn_mat.clone();
    let mut dyn_off = fp.dyn_off.clone();
    dyn_mat.push(DMatrix::zeros(n, dims.n_tau()));
    dyn_off.push(DVector::zeros(n));
    debug_assert_eq!(dyn_mat.len(), horizon);
    LqrProblem::new(
        *dims,
        fp.cost_quad.clone(),
        fp.cost_lin.clone(),
        dyn_mat,
        dyn_off,
        fp.traj.x[0].clone(),
    )
    .map_err(|e| MpcDiffError::Shape(e.to_string()))
}

/// Differentiate a downstream loss through the fixed point, given
/// `grad_tau[t] = d loss / d tau_t` evaluated at `fp.traj`.
///
/// Errors if the fixed point is not converged: the derivative of an
/// unconverged iterate is not defined by the fixed-point argument.
pub fn mpc_backward<D: DynModel, C: CostModel>(
    problem: &MpcProblem<D, C>,
    fp: &FixedPoint,
    grad_tau: &[DVector<f64>],
) -> Result<MpcGradients, MpcDiffError> {
    if !fp.converged {
        return Err(MpcDiffError::NotConverged);
    }
    let dims = problem.dims;
    let horizon = dims.horizon;
    if grad_tau.len() != horizon {
        return Err(MpcDiffError::Shape(format!(
            "grad_tau: expected {horizon} entries, got {}",
            grad_tau.len()
        )));
    }
    if let Some(v) = grad_tau.iter().find(|v| v.len() != dims.n_tau()) {
        return Err(MpcDiffError::Shape(format!(
            "grad_tau entry: expected length {}, got {}",
            dims.n_tau(),
            v.len()
        )));
    }

    let d_traj = zero_constrained_differential(&dims, fp, grad_tau)?;
    let as_lqr = fixed_point_as_lqr(&dims, fp)?;
    let duals = lqr_duals(&as_lqr, &fp.traj);
    let d_duals = duals_with_lin(&as_lqr, &d_traj, grad_tau);

    let mut d_cost_quad = Vec::with_capacity(horizon);
    let mut d_cost_lin = Vec::with_capacity(horizon);
    let mut d_dyn_mat = Vec::with_capacity(horizon - 1);
    let mut d_dyn_off = Vec::with_capacity(horizon - 1);
    for t in 0..horizon {
        let tau = fp.traj.tau(t);
        let d_tau = d_traj.tau(t);
        let outer = &d_tau * tau.transpose();
        d_cost_quad.push((&outer + outer.transpose()) * 0.5);
        d_cost_lin.push(d_tau.clone());
        if t < horizon - 1 {
            d_dyn_mat.push(
                &d_duals.lambda[t + 1] * tau.transpose()
                    + &duals.lambda[t + 1] * d_tau.transpose(),
            );
            d_dyn_off.push(d_duals.lambda[t + 1].clone());
        }
    }
    let d_x_init = d_duals.initial().clone();
    Ok(MpcGradients { d_cost_quad, d_cost_lin, d_dyn_mat, d_dyn_off, d_x_init, d_traj })
}

/// Gradients with respect to the goal-cost parameters.  The weight gradient
/// is reported in the squared-weight parameterization (training steps
/// `w^2`, which keeps the cost Hessian positive semidefinite for free).
#[derive(Debug, Clone)]
pub struct GoalCostGrad {
    pub weights_sq: DVector<f64>,
    pub goal: DVector<f64>,
}

/// Chain the model-level gradients into the goal-cost parameters.  The cost
/// data depend on them analytically: `H = 2 diag(w^2)` and
/// `c = -2 diag(w^2) goal` in absolute form, so per joint dimension `j`:
/// `d/d(w_j^2) = sum_t (2 dH_t[j,j] - 2 goal_j dc_t[j])` and
/// `d/d(goal_j) = sum_t (-2 w_j^2 dc_t[j])`.
pub fn goal_cost_grad(cost: &GoalCost, grads: &MpcGradients) -> GoalCostGrad {
    let k = cost.weights.len();
    let horizon = grads.d_cost_quad.len();
    let mut weights_sq = DVector::zeros(k);
    let mut goal = DVector::zeros(k);
    for t in 0..horizon {
        for j in 0..k {
            weights_sq[j] += 2.0 * grads.d_cost_quad[t][(j, j)]
                - 2.0 * cost.goal[j] * grads.d_cost_lin[t][j];
            goal[j] += -2.0 * cost.weights[j] * cost.weights[j] * grads.d_cost_lin[t][j];
        }
    }
    GoalCostGrad { weights_sq, goal }
}

/// Contraction of the model-level gradients with the parameter sensitivity
/// of the linearization, at the frozen fixed trajectory:
/// `sum_t <dF_t, F_t(theta)> + <df_t, step_t(theta) - F_t(theta) tau_t>`.
fn linearization_contraction<D: DynModel>(
    dynamics: &D,
    traj: &Trajectory,
    grads: &MpcGradients,
) -> f64 {
    let mut acc = 0.0;
    for (t, (d_f, d_off)) in grads.d_dyn_mat.iter().zip(&grads.d_dyn_off).enumerate() {
        let jac = dynamics.jacobian(&traj.x[t], &traj.u[t]);
        let step = dynamics.step(&traj.x[t], &traj.u[t]);
        let off = step - &jac * traj.tau(t);
        acc += d_f.dot(&jac) + d_off.dot(&off);
    }
    acc
}

/// Gradient with respect to the learnable physical parameters of the
/// dynamics, by central finite differences of the linearization contraction
/// over each parameter (second derivatives of the dynamics are never formed
/// analytically; at a handful of parameters the extra sweeps are free).
pub fn dyn_param_grad<D: ParamDyn>(
    dynamics: &D,
    fp: &FixedPoint,
    grads: &MpcGradients,
) -> Vec<f64> {
    let params = dynamics.params();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let mut plus = params.clone();
        let mut minus = params.clone();
        plus[i] += PARAM_FD_STEP;
        minus[i] -= PARAM_FD_STEP;
        let c_plus = linearization_contraction(&dynamics.with_params(&plus), &fp.traj, grads);
        let c_minus = linearization_contraction(&dynamics.with_params(&minus), &fp.traj, grads);
        grad.push((c_plus - c_minus) / (2.0 * PARAM_FD_STEP));
    }
    grad
}

/// Analytic override of [`dyn_param_grad`] for strictly linear dynamics:
/// the Jacobian entries ARE the parameters and the affine offset vanishes
/// identically in them, so the gradient is a plain sum of `d_dyn_mat`,
/// flattened in the same order as [`crate::envs::LinearDyn::params`].
pub fn linear_dyn_grad(n_state: usize, n_ctrl: usize, grads: &MpcGradients) -> Vec<f64> {
    let n_tau = n_state + n_ctrl;
    let mut total = DMatrix::zeros(n_state, n_tau);
    for d_f in &grads.d_dyn_mat {
        total += d_f;
    }
    let mut out = Vec::with_capacity(n_state * n_tau);
    for i in 0..n_state {
        for j in 0..n_state {
            out.push(total[(i, j)]);
        }
    }
    for i in 0..n_state {
        for j in 0..n_ctrl {
            out.push(total[(i, n_state + j)]);
        }
    }
    out
}
