//! Finite-horizon LQR: backward Riccati recursion, forward rollout, and
//! recovery of the dynamics-constraint dual variables.
//!
//! The recursion never reads the final-step dynamics entries: the terminal
//! value function is zero, so the loop starts from `Q = cost_quad[T-1]`,
//! `q = cost_lin[T-1]` directly.

use crate::core::{assemble_tau, Duals, LqrProblem, PdFactor, Trajectory};
use nalgebra::{DMatrix, DVector};
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum LqrError {
    /// The control-control block of the stage Hessian failed to factorize.
    /// The caller is expected to regularize and retry.
    NotPositiveDefinite { timestep: usize },
    Shape(String),
}

impl fmt::Display for LqrError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LqrError::NotPositiveDefinite { timestep } => write!(
                f,
                "control-control cost block not positive definite at timestep {timestep}"
            ),
            LqrError::Shape(s) => write!(f, "shape mismatch: {s}"),
        }
    }
}

impl std::error::Error for LqrError {}

/// Per-timestep products of the backward recursion: factorizations of the
/// control-control blocks, feedback/offset gains, and value-function terms.
/// Kept so the differential solve in the backward pass can reuse them.
#[derive(Debug, Clone)]
pub struct RiccatiCache {
    pub quu_fac: Vec<PdFactor>,
    /// Feedback gains; `u_t = gain[t] * x_t + gain_off[t]`.
    pub gain: Vec<DMatrix<f64>>,
    pub gain_off: Vec<DVector<f64>>,
    pub val_quad: Vec<DMatrix<f64>>,
    pub val_lin: Vec<DVector<f64>>,
}

/// Solve the LQR problem by backward Riccati recursion + forward rollout.
pub fn lqr_solve(p: &LqrProblem) -> Result<(Trajectory, RiccatiCache), LqrError> {
    let n = p.dims.n_state;
    let m = p.dims.n_ctrl;
    let horizon = p.dims.horizon;

    let mut quu_fac: Vec<PdFactor> = Vec::with_capacity(horizon);
    let mut gain: Vec<DMatrix<f64>> = Vec::with_capacity(horizon);
    let mut gain_off: Vec<DVector<f64>> = Vec::with_capacity(horizon);
    let mut val_quad: Vec<DMatrix<f64>> = Vec::with_capacity(horizon);
    let mut val_lin: Vec<DVector<f64>> = Vec::with_capacity(horizon);

    let mut v_quad = DMatrix::zeros(n, n);
    let mut v_lin = DVector::zeros(n);
    for t in (0..horizon).rev() {
        let (q_mat, q_vec) = if t == horizon - 1 {
            (p.cost_quad[t].clone(), p.cost_lin[t].clone())
        } else {
            let vf = &v_quad * &p.dyn_mat[t];
            let q_mat = &p.cost_quad[t] + p.dyn_mat[t].tr_mul(&vf);
            let q_vec =
                &p.cost_lin[t] + p.dyn_mat[t].tr_mul(&(&v_quad * &p.dyn_off[t] + &v_lin));
            (q_mat, q_vec)
        };
        let qxx = q_mat.view_range(0..n, 0..n).into_owned();
        let qxu = q_mat.view_range(0..n, n..n + m).into_owned();
        let qux = q_mat.view_range(n..n + m, 0..n).into_owned();
        let quu = q_mat.view_range(n..n + m, n..n + m).into_owned();
        let qx = q_vec.rows(0, n).into_owned();
        let qu = q_vec.rows(n, m).into_owned();

        let fac =
            PdFactor::new(&quu).map_err(|_| LqrError::NotPositiveDefinite { timestep: t })?;
        let k_mat = -fac.solve_mat(&qux);
        let k_off = -fac.solve_vec(&qu);

        let mut v_next = &qxx + &qxu * &k_mat + k_mat.tr_mul(&qux) + k_mat.tr_mul(&(&quu * &k_mat));
        let v_sym = (&v_next + v_next.transpose()) * 0.5;
        v_next = v_sym;
        v_lin = &qx + &qxu * &k_off + k_mat.tr_mul(&qu) + k_mat.tr_mul(&(&quu * &k_off));
        v_quad = v_next;

        quu_fac.push(fac);
        gain.push(k_mat);
        gain_off.push(k_off);
        val_quad.push(v_quad.clone());
        val_lin.push(v_lin.clone());
    }
    quu_fac.reverse();
    gain.reverse();
    gain_off.reverse();
    val_quad.reverse();
    val_lin.reverse();

    let mut x = Vec::with_capacity(horizon);
    let mut u = Vec::with_capacity(horizon);
    x.push(p.x_init.clone());
    for t in 0..horizon {
        let ut = &gain[t] * &x[t] + &gain_off[t];
        u.push(ut);
        if t < horizon - 1 {
            let tau = assemble_tau(&x[t], &u[t]);
            x.push(&p.dyn_mat[t] * tau + &p.dyn_off[t]);
        }
    }

    Ok((
        Trajectory { x, u },
        RiccatiCache { quu_fac, gain, gain_off, val_quad, val_lin },
    ))
}

/// Recover the dual variables of the dynamics constraints from an optimal
/// trajectory.  `lambda[t]` pairs with the constraint defining `x_t`, so
/// `lambda[0]` is the multiplier of the initial-state constraint.
pub fn lqr_duals(p: &LqrProblem, traj: &Trajectory) -> Duals {
    duals_with_lin(p, traj, &p.cost_lin)
}

/// Dual recursion with an overridden linear cost term (used to recover the
/// duals of the differential problem without materializing a second
/// `LqrProblem`).
pub(crate) fn duals_with_lin(
    p: &LqrProblem,
    traj: &Trajectory,
    lin: &[DVector<f64>],
) -> Duals {
    let n = p.dims.n_state;
    let horizon = p.dims.horizon;
    let mut lambda = vec![DVector::zeros(n); horizon];
    let last = horizon - 1;
    let tau_last = traj.tau(last);
    lambda[last] = p.cost_quad[last].rows(0, n) * tau_last + lin[last].rows(0, n);
    for t in (0..last).rev() {
        let tau = traj.tau(t);
        let fx = p.dyn_mat[t].columns(0, n);
        lambda[t] =
            p.cost_quad[t].rows(0, n) * tau + lin[t].rows(0, n) + fx.tr_mul(&lambda[t + 1]);
    }
    Duals { lambda }
}

/// Solve the companion problem that shares this problem's quadratic cost and
/// dynamics matrices but replaces the linear cost with `lin`, the dynamics
/// offsets with zero, and the initial state with zero — reusing the cached
/// factorizations and feedback gains instead of refactorizing.
///
/// With the quadratic terms unchanged, the feedback gains are unchanged and
/// the linear value term collapses to `v_t = q_x + gain' q_u`, so only
/// vector work remains.
pub fn lqr_resolve_linear(
    p: &LqrProblem,
    cache: &RiccatiCache,
    lin: &[DVector<f64>],
) -> Result<Trajectory, LqrError> {
    let n = p.dims.n_state;
    let m = p.dims.n_ctrl;
    let horizon = p.dims.horizon;
    if lin.len() != horizon {
        return Err(LqrError::Shape(format!(
            "linear cost: expected {horizon} entries, got {}",
            lin.len()
        )));
    }
    if let Some(v) = lin.iter().find(|v| v.len() != n + m) {
        return Err(LqrError::Shape(format!(
            "linear cost entry: expected length {}, got {}",
            n + m,
            v.len()
        )));
    }

    let mut k_off = vec![DVector::zeros(m); horizon];
    let mut v_lin = DVector::zeros(n);
    for t in (0..horizon).rev() {
        let q_vec = if t == horizon - 1 {
            lin[t].clone()
        } else {
            &lin[t] + p.dyn_mat[t].tr_mul(&v_lin)
        };
        let qx = q_vec.rows(0, n).into_owned();
        let qu = q_vec.rows(n, m).into_owned();
        k_off[t] = -cache.quu_fac[t].solve_vec(&qu);
        v_lin = qx + cache.gain[t].tr_mul(&qu);
    }

    let mut x = Vec::with_capacity(horizon);
    let mut u = Vec::with_capacity(horizon);
    x.push(DVector::zeros(n));
    for t in 0..horizon {
        let ut = &cache.gain[t] * &x[t] + &k_off[t];
        u.push(ut);
        if t < horizon - 1 {
            let tau = assemble_tau(&x[t], &u[t]);
            x.push(&p.dyn_mat[t] * tau);
        }
    }
    Ok(Trajectory { x, u })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::core::Dims;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Brute-force oracle: assemble the full first-order optimality system of
    /// the problem (stationarity in every tau_t plus all the equality
    /// constraints) as one dense linear system and solve it directly.
    /// Unknowns are [tau_0 .. tau_{T-1}, nu_0 .. nu_{T-1}] with nu_t paired
    /// with the constraint defining x_t.
    pub(crate) fn dense_kkt_oracle(p: &LqrProblem) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let n = p.dims.n_state;
        let ntau = p.dims.n_tau();
        let horizon = p.dims.horizon;
        let total = horizon * ntau + horizon * n;
        let mut a = DMatrix::<f64>::zeros(total, total);
        let mut b = DVector::<f64>::zeros(total);
        let tau_ix = |t: usize| t * ntau;
        let nu_ix = |t: usize| horizon * ntau + t * n;

        for t in 0..horizon {
            let r = tau_ix(t);
            a.view_mut((r, tau_ix(t)), (ntau, ntau))
                .copy_from(&p.cost_quad[t]);
            if t < horizon - 1 {
                let ft = p.dyn_mat[t].transpose();
                let mut block = a.view_mut((r, nu_ix(t + 1)), (ntau, n));
                block += &ft;
            }
            let mut eye_block = a.view_mut((r, nu_ix(t)), (n, n));
            eye_block -= DMatrix::<f64>::identity(n, n);
            for i in 0..ntau {
                b[r + i] -= p.cost_lin[t][i];
            }
        }
        for t in 0..horizon {
            let r = nu_ix(t);
            a.view_mut((r, tau_ix(t)), (n, n))
                .copy_from(&DMatrix::identity(n, n));
            if t == 0 {
                for i in 0..n {
                    b[r + i] += p.x_init[i];
                }
            } else {
                let mut block = a.view_mut((r, tau_ix(t - 1)), (n, ntau));
                block -= &p.dyn_mat[t - 1];
                for i in 0..n {
                    b[r + i] += p.dyn_off[t - 1][i];
                }
            }
        }
        let z = a.lu().solve(&b).expect("dense KKT system is singular");
        let taus = (0..horizon)
            .map(|t| z.rows(tau_ix(t), ntau).into_owned())
            .collect();
        let nus = (0..horizon)
            .map(|t| z.rows(nu_ix(t), n).into_owned())
            .collect();
        (taus, nus)
    }

    pub(crate) fn random_problem(rng: &mut ChaCha8Rng, horizon: usize, n: usize, m: usize) -> LqrProblem {
        let ntau = n + m;
        let mut cost_quad = Vec::new();
        let mut cost_lin = Vec::new();
        let mut dyn_mat = Vec::new();
        let mut dyn_off = Vec::new();
        for _ in 0..horizon {
            let a = DMatrix::from_fn(ntau, ntau, |_, _| rng.gen_range(-1.0..1.0));
            cost_quad.push(a.tr_mul(&a) + DMatrix::identity(ntau, ntau) * 0.1);
            cost_lin.push(DVector::from_fn(ntau, |_, _| rng.gen_range(-1.0..1.0)));
            dyn_mat.push(DMatrix::from_fn(n, ntau, |_, _| rng.gen_range(-1.0..1.0)));
            dyn_off.push(DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0)));
        }
        let x_init = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        LqrProblem::new(
            Dims::new(n, m, horizon).unwrap(),
            cost_quad,
            cost_lin,
            dyn_mat,
            dyn_off,
            x_init,
        )
        .unwrap()
    }

    #[test]
    fn two_step_scalar_example() {
        // cost 0.5*(x_t^2 + u_t^2) each step, dynamics x' = x + u, x0 = 1:
        // minimizing 0.5*(1 + u0^2 + (1+u0)^2 + u1^2) gives u0 = -0.5, u1 = 0.
        let dims = Dims::new(1, 1, 2).unwrap();
        let p = LqrProblem::new(
            dims,
            vec![DMatrix::identity(2, 2); 2],
            vec![DVector::zeros(2); 2],
            vec![DMatrix::from_vec(1, 2, vec![1.0, 1.0]); 2],
            vec![DVector::zeros(1); 2],
            DVector::from_vec(vec![1.0]),
        )
        .unwrap();
        let (traj, _) = lqr_solve(&p).unwrap();
        assert!((traj.x[0][0] - 1.0).abs() < 1e-12);
        assert!((traj.u[0][0] + 0.5).abs() < 1e-12);
        assert!((traj.x[1][0] - 0.5).abs() < 1e-12);
        assert!(traj.u[1][0].abs() < 1e-12);

        // dual block must agree with the dense oracle too
        let duals = lqr_duals(&p, &traj);
        let (taus, nus) = dense_kkt_oracle(&p);
        for t in 0..2 {
            assert!((traj.tau(t) - &taus[t]).abs().max() < 1e-10);
            assert!((&duals.lambda[t] - &nus[t]).abs().max() < 1e-10);
        }
    }

    #[test]
    fn zero_problem_gives_zero_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = random_problem(&mut rng, 4, 2, 2);
        for t in 0..4 {
            p.cost_lin[t].fill(0.0);
            p.dyn_off[t].fill(0.0);
        }
        p.x_init.fill(0.0);
        let (traj, _) = lqr_solve(&p).unwrap();
        for t in 0..4 {
            assert!(traj.x[t].abs().max() < 1e-14);
            assert!(traj.u[t].abs().max() < 1e-14);
        }
        let duals = lqr_duals(&p, &traj);
        for t in 0..4 {
            assert!(duals.lambda[t].abs().max() < 1e-14);
        }
    }

    #[test]
    fn single_step_duals_base_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_problem(&mut rng, 1, 2, 1);
        let (traj, _) = lqr_solve(&p).unwrap();
        let duals = lqr_duals(&p, &traj);
        let expect = p.cost_quad[0].rows(0, 2) * traj.tau(0) + p.cost_lin[0].rows(0, 2);
        assert!((&duals.lambda[0] - expect).abs().max() < 1e-12);
    }

    #[test]
    fn matches_dense_kkt_oracle_primal_and_dual() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..50 {
            let horizon = rng.gen_range(1..=5);
            let n = rng.gen_range(1..=3);
            let m = rng.gen_range(1..=2);
            let p = random_problem(&mut rng, horizon, n, m);
            let (traj, _) = lqr_solve(&p).unwrap();
            let duals = lqr_duals(&p, &traj);
            let (taus, nus) = dense_kkt_oracle(&p);
            for t in 0..horizon {
                let pe = (traj.tau(t) - &taus[t]).abs().max();
                let de = (&duals.lambda[t] - &nus[t]).abs().max();
                assert!(pe <= 1e-8, "trial {trial} t={t} primal err {pe}");
                assert!(de <= 1e-8, "trial {trial} t={t} dual err {de}");
            }
        }
    }

    #[test]
    fn stationarity_residual_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let horizon = rng.gen_range(2..=5);
            let n = rng.gen_range(1..=3);
            let m = rng.gen_range(1..=2);
            let p = random_problem(&mut rng, horizon, n, m);
            let (traj, _) = lqr_solve(&p).unwrap();
            let duals = lqr_duals(&p, &traj);
            for t in 0..horizon {
                // full joint stationarity: C tau + c + F' lambda_{t+1} - [lambda_t; 0]
                let mut r = &p.cost_quad[t] * traj.tau(t) + &p.cost_lin[t];
                if t < horizon - 1 {
                    r += p.dyn_mat[t].tr_mul(&duals.lambda[t + 1]);
                }
                for i in 0..n {
                    r[i] -= duals.lambda[t][i];
                }
                assert!(r.abs().max() <= 1e-8, "t={t} residual {}", r.abs().max());
            }
        }
    }

    #[test]
    fn rolled_forward_gains_reproduce_controls() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_problem(&mut rng, 5, 3, 2);
        let (traj, cache) = lqr_solve(&p).unwrap();
        let mut x = p.x_init.clone();
        for t in 0..5 {
            let u = &cache.gain[t] * &x + &cache.gain_off[t];
            assert_eq!(u, traj.u[t], "controls must match bit-for-bit at t={t}");
            if t < 4 {
                x = &p.dyn_mat[t] * assemble_tau(&x, &u) + &p.dyn_off[t];
            }
        }
    }

    #[test]
    fn non_pd_quu_names_the_timestep() {
        let dims = Dims::new(1, 1, 3).unwrap();
        let mut cost_quad = vec![DMatrix::identity(2, 2); 3];
        // make the control block at t=1 negative definite
        cost_quad[1][(1, 1)] = -5.0;
        let p = LqrProblem::new(
            dims,
            cost_quad,
            vec![DVector::zeros(2); 3],
            vec![DMatrix::from_vec(1, 2, vec![1.0, 0.2]); 3],
            vec![DVector::zeros(1); 3],
            DVector::from_vec(vec![1.0]),
        )
        .unwrap();
        match lqr_solve(&p) {
            Err(LqrError::NotPositiveDefinite { timestep }) => assert_eq!(timestep, 1),
            other => panic!("expected non-PD error, got {other:?}"),
        }
    }

    #[test]
    fn resolve_linear_matches_full_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let horizon = rng.gen_range(2..=5);
            let n = rng.gen_range(1..=3);
            let m = rng.gen_range(1..=2);
            let p = random_problem(&mut rng, horizon, n, m);
            let (_, cache) = lqr_solve(&p).unwrap();
            let lin: Vec<DVector<f64>> = (0..horizon)
                .map(|_| DVector::from_fn(n + m, |_, _| rng.gen_range(-1.0..1.0)))
                .collect();
            let fast = lqr_resolve_linear(&p, &cache, &lin).unwrap();

            let mut shadow = p.clone();
            shadow.cost_lin = lin.clone();
            for t in 0..horizon {
                shadow.dyn_off[t].fill(0.0);
            }
            shadow.x_init.fill(0.0);
            let (slow, _) = lqr_solve(&shadow).unwrap();
            for t in 0..horizon {
                assert!((fast.tau(t) - slow.tau(t)).abs().max() <= 1e-12);
            }
        }
    }
}
