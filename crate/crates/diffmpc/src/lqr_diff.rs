//! Analytic differentiation of the LQR solution with respect to every
//! problem datum, by solving one companion LQR problem: same quadratic cost
//! and dynamics matrices, linear cost replaced by the downstream gradient,
//! offsets and initial state replaced by zero.

use crate::core::{Duals, LqrProblem, Trajectory};
use crate::lqr::{duals_with_lin, lqr_resolve_linear, LqrError, RiccatiCache};
use nalgebra::{DMatrix, DVector};

/// Gradients of a downstream scalar loss with respect to the LQR problem
/// data.  Shapes mirror [`LqrProblem`]; the final-step dynamics gradients are
/// identically zero (there is no dynamics constraint after the last step).
#[derive(Debug, Clone)]
pub struct LqrGradients {
    pub d_cost_quad: Vec<DMatrix<f64>>,
    pub d_cost_lin: Vec<DVector<f64>>,
    pub d_dyn_mat: Vec<DMatrix<f64>>,
    pub d_dyn_off: Vec<DVector<f64>>,
    pub d_x_init: DVector<f64>,
}

/// Differentiate the optimal trajectory's downstream loss with respect to
/// the problem data, given `grad_tau[t] = d loss / d tau_t` at the optimum.
///
/// The differential trajectory and duals solve the same KKT system as the
/// original problem with the linear data swapped out, so the cached
/// factorizations from the forward solve are reused as-is.
pub fn lqr_backward(
    p: &LqrProblem,
    traj: &Trajectory,
    duals: &Duals,
    grad_tau: &[DVector<f64>],
    cache: &RiccatiCache,
) -> Result<LqrGradients, LqrError> {
    let n = p.dims.n_state;
    let horizon = p.dims.horizon;

    let d_traj = lqr_resolve_linear(p, cache, grad_tau)?;
    let d_duals = duals_with_lin(p, &d_traj, grad_tau);

    let mut d_cost_quad = Vec::with_capacity(horizon);
    let mut d_cost_lin = Vec::with_capacity(horizon);
    let mut d_dyn_mat = Vec::with_capacity(horizon);
    let mut d_dyn_off = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let tau = traj.tau(t);
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
        } else {
            d_dyn_mat.push(DMatrix::zeros(n, p.dims.n_tau()));
            d_dyn_off.push(DVector::zeros(n));
        }
    }
    let d_x_init = d_duals.initial().clone();
    Ok(LqrGradients { d_cost_quad, d_cost_lin, d_dyn_mat, d_dyn_off, d_x_init })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lqr::tests::random_problem;
    use crate::lqr::{lqr_duals, lqr_solve};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn backward_of(p: &LqrProblem, grad_tau: &[DVector<f64>]) -> LqrGradients {
        let (traj, cache) = lqr_solve(p).unwrap();
        let duals = lqr_duals(p, &traj);
        lqr_backward(p, &traj, &duals, grad_tau, &cache).unwrap()
    }

    /// Downstream loss used by the finite-difference oracle: a fixed linear
    /// functional of the optimal trajectory, so grad_tau is constant.
    fn loss_of(p: &LqrProblem, grad_tau: &[DVector<f64>]) -> f64 {
        let (traj, _) = lqr_solve(p).unwrap();
        grad_tau
            .iter()
            .enumerate()
            .map(|(t, g)| g.dot(&traj.tau(t)))
            .sum()
    }

    fn rel_err(fd: f64, an: f64) -> f64 {
        (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6)
    }

    #[test]
    fn zero_grad_tau_gives_exactly_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = random_problem(&mut rng, 4, 2, 2);
        let zeros: Vec<DVector<f64>> = vec![DVector::zeros(4); 4];
        let g = backward_of(&p, &zeros);
        for t in 0..4 {
            assert_eq!(g.d_cost_quad[t].abs().max(), 0.0);
            assert_eq!(g.d_cost_lin[t].abs().max(), 0.0);
            assert_eq!(g.d_dyn_mat[t].abs().max(), 0.0);
            assert_eq!(g.d_dyn_off[t].abs().max(), 0.0);
        }
        assert_eq!(g.d_x_init.abs().max(), 0.0);
    }

    #[test]
    fn final_step_dynamics_gradients_are_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = random_problem(&mut rng, 3, 2, 1);
        let grad_tau: Vec<DVector<f64>> = (0..3)
            .map(|_| DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0)))
            .collect();
        let g = backward_of(&p, &grad_tau);
        assert_eq!(g.d_dyn_mat[2].abs().max(), 0.0);
        assert_eq!(g.d_dyn_off[2].abs().max(), 0.0);
    }

    #[test]
    fn cost_quad_gradient_is_exactly_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = random_problem(&mut rng, 4, 3, 2);
        let grad_tau: Vec<DVector<f64>> = (0..4)
            .map(|_| DVector::from_fn(5, |_, _| rng.gen_range(-1.0..1.0)))
            .collect();
        let g = backward_of(&p, &grad_tau);
        for t in 0..4 {
            let d = &g.d_cost_quad[t];
            assert_eq!((d - d.transpose()).abs().max(), 0.0);
        }
    }

    #[test]
    fn cost_lin_gradient_reads_back_the_differential_trajectory() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let p = random_problem(&mut rng, 3, 2, 2);
        let grad_tau: Vec<DVector<f64>> = (0..3)
            .map(|_| DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0)))
            .collect();
        let (_, cache) = lqr_solve(&p).unwrap();
        let d_traj = lqr_resolve_linear(&p, &cache, &grad_tau).unwrap();
        let g = backward_of(&p, &grad_tau);
        for t in 0..3 {
            assert_eq!(g.d_cost_lin[t], d_traj.tau(t));
        }
    }

    #[test]
    fn backward_reuses_factorizations_consistently() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let p = random_problem(&mut rng, 4, 2, 2);
        let grad_tau: Vec<DVector<f64>> = (0..4)
            .map(|_| DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0)))
            .collect();
        let (traj, cache) = lqr_solve(&p).unwrap();
        let duals = lqr_duals(&p, &traj);
        let g1 = lqr_backward(&p, &traj, &duals, &grad_tau, &cache).unwrap();
        // a freshly refactorized cache must give the same answer
        let (_, cache2) = lqr_solve(&p).unwrap();
        let g2 = lqr_backward(&p, &traj, &duals, &grad_tau, &cache2).unwrap();
        for t in 0..4 {
            assert!((&g1.d_cost_quad[t] - &g2.d_cost_quad[t]).abs().max() <= 1e-12);
            assert!((&g1.d_dyn_mat[t] - &g2.d_dyn_mat[t]).abs().max() <= 1e-12);
        }
        assert!((&g1.d_x_init - &g2.d_x_init).abs().max() <= 1e-12);
    }

    /// Entrywise central-difference check over every gradient block on a
    /// batch of random problems.  Off-diagonal quadratic-cost entries are
    /// perturbed as a symmetric pair (the stored matrix is symmetric), whose
    /// sensitivity is twice the reported per-entry gradient.
    #[test]
    fn all_gradient_blocks_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let eps = 1e-5;
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let horizon = rng.gen_range(2..=5);
            let n = rng.gen_range(1..=3);
            let m = rng.gen_range(1..=2);
            let ntau = n + m;
            let p = random_problem(&mut rng, horizon, n, m);
            let grad_tau: Vec<DVector<f64>> = (0..horizon)
                .map(|_| DVector::from_fn(ntau, |_, _| rng.gen_range(-1.0..1.0)))
                .collect();
            let g = backward_of(&p, &grad_tau);

            for t in 0..horizon {
                // quadratic cost entries (symmetric-pair perturbation off-diagonal)
                for i in 0..ntau {
                    for j in i..ntau {
                        let mut pp = p.clone();
                        let mut pm = p.clone();
                        pp.cost_quad[t][(i, j)] += eps;
                        pm.cost_quad[t][(i, j)] -= eps;
                        if i != j {
                            pp.cost_quad[t][(j, i)] += eps;
                            pm.cost_quad[t][(j, i)] -= eps;
                        }
                        let fd = (loss_of(&pp, &grad_tau) - loss_of(&pm, &grad_tau)) / (2.0 * eps);
                        let an = if i == j {
                            g.d_cost_quad[t][(i, j)]
                        } else {
                            2.0 * g.d_cost_quad[t][(i, j)]
                        };
                        worst = worst.max(rel_err(fd, an));
                    }
                }
                for i in 0..ntau {
                    let mut pp = p.clone();
                    let mut pm = p.clone();
                    pp.cost_lin[t][i] += eps;
                    pm.cost_lin[t][i] -= eps;
                    let fd = (loss_of(&pp, &grad_tau) - loss_of(&pm, &grad_tau)) / (2.0 * eps);
                    worst = worst.max(rel_err(fd, g.d_cost_lin[t][i]));
                }
                for i in 0..n {
                    for j in 0..ntau {
                        let mut pp = p.clone();
                        let mut pm = p.clone();
                        pp.dyn_mat[t][(i, j)] += eps;
                        pm.dyn_mat[t][(i, j)] -= eps;
                        let fd = (loss_of(&pp, &grad_tau) - loss_of(&pm, &grad_tau)) / (2.0 * eps);
                        worst = worst.max(rel_err(fd, g.d_dyn_mat[t][(i, j)]));
                    }
                    let mut pp = p.clone();
                    let mut pm = p.clone();
                    pp.dyn_off[t][i] += eps;
                    pm.dyn_off[t][i] -= eps;
                    let fd = (loss_of(&pp, &grad_tau) - loss_of(&pm, &grad_tau)) / (2.0 * eps);
                    worst = worst.max(rel_err(fd, g.d_dyn_off[t][i]));
                }
            }
            for i in 0..n {
                let mut pp = p.clone();
                let mut pm = p.clone();
                pp.x_init[i] += eps;
                pm.x_init[i] -= eps;
                let fd = (loss_of(&pp, &grad_tau) - loss_of(&pm, &grad_tau)) / (2.0 * eps);
                worst = worst.max(rel_err(fd, g.d_x_init[i]));
            }
        }
        assert!(worst <= 1e-4, "worst relative error {worst}");
    }
}

