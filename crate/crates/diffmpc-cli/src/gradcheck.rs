//! Analytic-gradient spot checks against central finite differences, run
//! on one representative instance per environment.  The downstream loss is
//! a fixed random linear functional of the optimal trajectory, so its
//! trajectory gradient is a constant vector.

use diffmpc::core::{Dims, LqrProblem};
use diffmpc::envs::{Cartpole, GoalCost, Pendulum};
use diffmpc::imitation::{goal_cost_from_params, goal_cost_params};
use diffmpc::lqr::{lqr_duals, lqr_solve};
use diffmpc::lqr_diff::lqr_backward;
use diffmpc::mpc::{mpc_solve, MpcProblem, ParamDyn};
use diffmpc::mpc_diff::{dyn_param_grad, goal_cost_grad, mpc_backward};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{CartpoleSpec, CliError, EnvSpec, ExperimentConfig, LqrSpec, PendulumSpec};
use crate::output::{BlockReport, GradcheckSummary, Summary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum GcEnvArg {
    Pendulum,
    Cartpole,
    Lqr,
}

/// Instances used by the bare `gradcheck` subcommand.
pub fn default_env(kind: GcEnvArg) -> EnvSpec {
    match kind {
        GcEnvArg::Pendulum => EnvSpec::Pendulum(PendulumSpec {
            mass: 1.0,
            length: 1.0,
            gravity: 10.0,
            damping: 0.0,
            wind: 0.0,
            horizon: 20,
            ctrl_bound: 2.0,
        }),
        GcEnvArg::Cartpole => EnvSpec::Cartpole(CartpoleSpec {
            cart_mass: 1.0,
            pole_mass: 0.1,
            gravity: 10.0,
            length: 0.5,
            horizon: 20,
            ctrl_bound: 20.0,
        }),
        GcEnvArg::Lqr => EnvSpec::Lqr(LqrSpec {
            n_state: 3,
            n_ctrl: 2,
            horizon: 4,
            ctrl_bound: 1.0,
        }),
    }
}

#[derive(Debug)]
pub struct GradcheckReport {
    pub env: &'static str,
    pub eps: f64,
    pub threshold: f64,
    pub blocks: Vec<(String, f64)>,
    pub overall: f64,
    pub pass: bool,
}

impl GradcheckReport {
    pub fn to_summary(&self) -> GradcheckSummary {
        GradcheckSummary {
            env: self.env.to_string(),
            eps: self.eps,
            threshold: self.threshold,
            blocks: self
                .blocks
                .iter()
                .map(|(name, rel)| BlockReport { name: name.clone(), rel_error: *rel })
                .collect(),
            assembled_rel_error: self.overall,
            pass: self.pass,
        }
    }
}

pub fn gradcheck_for_env(env: &EnvSpec, eps: f64) -> Result<GradcheckReport, CliError> {
    match env {
        EnvSpec::Pendulum(p) => {
            let dynamics = Pendulum::new(p.mass, p.length, p.gravity)
                .with_damping(p.damping)
                .with_wind(p.wind);
            // a mild tilt near the upright goal
            let angle: f64 = 0.07;
            let x0 = DVector::from_vec(vec![angle.cos(), angle.sin(), 0.03]);
            check_mpc(
                "pendulum",
                dynamics,
                crate::experiments::pendulum_default_cost(),
                p.horizon,
                x0,
                p.ctrl_bound,
                eps,
            )
        }
        EnvSpec::Cartpole(c) => {
            let dynamics = Cartpole::new(c.cart_mass, c.pole_mass, c.gravity, c.length);
            let angle: f64 = 0.05;
            let x0 = DVector::from_vec(vec![0.02, 0.0, angle.cos(), angle.sin(), 0.0]);
            check_mpc(
                "cartpole",
                dynamics,
                crate::experiments::cartpole_default_cost(),
                c.horizon,
                x0,
                c.ctrl_bound,
                eps,
            )
        }
        EnvSpec::Lqr(l) => check_lqr(l, eps),
    }
}

pub fn run_gradcheck_experiment(cfg: &ExperimentConfig) -> Result<Summary, CliError> {
    let eps = cfg.eps.unwrap_or(1e-5);
    let report = gradcheck_for_env(&cfg.env, eps)?;
    let mut summary = Summary::new(cfg.experiment.name(), cfg.seed);
    summary.gradcheck = Some(report.to_summary());
    Ok(summary)
}

/// Relative error between two gradient vectors, with an absolute floor so
/// near-zero references do not blow the ratio up.
fn vec_rel_err(analytic: &[f64], fd: &[f64]) -> f64 {
    let diff: f64 =
        analytic.iter().zip(fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let base: f64 = fd.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / base.max(1e-6)
}

fn scalar_rel_err(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6)
}

fn check_mpc<D: ParamDyn>(
    env: &'static str,
    dynamics: D,
    cost: GoalCost,
    horizon: usize,
    x_init: DVector<f64>,
    bound: f64,
    eps: f64,
) -> Result<GradcheckReport, CliError> {
    let (n, m) = (dynamics.n_state(), dynamics.n_ctrl());
    let lo = DVector::from_element(m, -bound);
    let hi = DVector::from_element(m, bound);
    let dyn0 = dynamics.params();
    let cost0 = goal_cost_params(&cost);
    let k = cost0.len() / 2;

    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let grad_tau: Vec<DVector<f64>> = (0..horizon)
        .map(|_| DVector::from_fn(n + m, |_, _| rng.gen_range(-1.0..1.0)))
        .collect();

    let build = |dp: &[f64], cp: &[f64]| -> Result<MpcProblem<D, GoalCost>, CliError> {
        Ok(MpcProblem::new(
            dynamics.with_params(dp),
            goal_cost_from_params(cp),
            horizon,
            x_init.clone(),
            lo.clone(),
            hi.clone(),
        )
        .map_err(|e| CliError::Solver(e.to_string()))?
        .with_tol(1e-11)
        .with_max_iters(400))
    };
    let loss_at = |dp: &[f64], cp: &[f64]| -> Result<f64, CliError> {
        let fp = mpc_solve(&build(dp, cp)?);
        if !fp.converged {
            return Err(CliError::Solver(
                "a finite-difference companion solve did not converge; try another eps".into(),
            ));
        }
        Ok(grad_tau.iter().enumerate().map(|(t, g)| g.dot(&fp.traj.tau(t))).sum())
    };

    let problem = build(&dyn0, &cost0)?;
    let fp = mpc_solve(&problem);
    if !fp.converged {
        return Err(CliError::Solver("the base solve did not converge".into()));
    }
    let grads =
        mpc_backward(&problem, &fp, &grad_tau).map_err(|e| CliError::Solver(e.to_string()))?;
    let cost_grads = goal_cost_grad(&cost, &grads);
    let mut analytic = dyn_param_grad(&dynamics, &fp, &grads);
    analytic.extend(cost_grads.weights_sq.iter());
    analytic.extend(cost_grads.goal.iter());

    // central differences: physical and goal entries step by eps; squared
    // weights use a relative step whose minus point is clipped at zero
    let mut fd = Vec::with_capacity(analytic.len());
    for i in 0..dyn0.len() {
        let mut plus = dyn0.clone();
        let mut minus = dyn0.clone();
        plus[i] += eps;
        minus[i] -= eps;
        fd.push((loss_at(&plus, &cost0)? - loss_at(&minus, &cost0)?) / (2.0 * eps));
    }
    for i in 0..cost0.len() {
        let mut plus = cost0.clone();
        let mut minus = cost0.clone();
        if i < k {
            let step = (1e-3 * cost0[i]).max(eps);
            plus[i] += step;
            minus[i] = (cost0[i] - step).max(0.0);
        } else {
            plus[i] += eps;
            minus[i] -= eps;
        }
        let spread = plus[i] - minus[i];
        fd.push((loss_at(&dyn0, &plus)? - loss_at(&dyn0, &minus)?) / spread);
    }

    let nd = dyn0.len();
    let blocks = vec![
        ("dynamics".to_string(), vec_rel_err(&analytic[..nd], &fd[..nd])),
        ("cost_weights".to_string(), vec_rel_err(&analytic[nd..nd + k], &fd[nd..nd + k])),
        ("cost_goal".to_string(), vec_rel_err(&analytic[nd + k..], &fd[nd + k..])),
    ];
    let overall = vec_rel_err(&analytic, &fd);
    let threshold = 1e-3;
    Ok(GradcheckReport { env, eps, threshold, blocks, overall, pass: overall <= threshold })
}

fn random_lqr(rng: &mut ChaCha8Rng, horizon: usize, n: usize, m: usize) -> LqrProblem {
    let ntau = n + m;
    let mut cost_quad = Vec::with_capacity(horizon);
    let mut cost_lin = Vec::with_capacity(horizon);
    let mut dyn_mat = Vec::with_capacity(horizon);
    let mut dyn_off = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let a = DMatrix::from_fn(ntau, ntau, |_, _| rng.gen_range(-1.0..1.0));
        cost_quad.push(&a * a.transpose() / (ntau as f64) + DMatrix::identity(ntau, ntau) * 0.3);
        cost_lin.push(DVector::from_fn(ntau, |_, _| rng.gen_range(-1.0..1.0)));
        dyn_mat.push(DMatrix::from_fn(n, ntau, |_, _| rng.gen_range(-0.5..0.5)));
        dyn_off.push(DVector::from_fn(n, |_, _| rng.gen_range(-0.5..0.5)));
    }
    let x_init = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    let dims = Dims::new(n, m, horizon).expect("fixed dimensions are valid");
    LqrProblem::new(dims, cost_quad, cost_lin, dyn_mat, dyn_off, x_init)
        .expect("generated shapes are consistent")
}

/// Entrywise check of every gradient block of the LQR derivative.
/// Off-diagonal quadratic-cost entries are perturbed as a symmetric pair,
/// whose sensitivity is twice the per-entry gradient.
fn check_lqr(spec: &LqrSpec, eps: f64) -> Result<GradcheckReport, CliError> {
    let (n, m, horizon) = (spec.n_state, spec.n_ctrl, spec.horizon);
    let ntau = n + m;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = random_lqr(&mut rng, horizon, n, m);
    let grad_tau: Vec<DVector<f64>> = (0..horizon)
        .map(|_| DVector::from_fn(ntau, |_, _| rng.gen_range(-1.0..1.0)))
        .collect();

    let loss_at = |p: &LqrProblem| -> Result<f64, CliError> {
        let (traj, _) = lqr_solve(p).map_err(|e| CliError::Solver(e.to_string()))?;
        Ok(grad_tau.iter().enumerate().map(|(t, g)| g.dot(&traj.tau(t))).sum())
    };
    let fd_of = |mutate: &dyn Fn(&mut LqrProblem, f64)| -> Result<f64, CliError> {
        let mut plus = p.clone();
        let mut minus = p.clone();
        mutate(&mut plus, eps);
        mutate(&mut minus, -eps);
        Ok((loss_at(&plus)? - loss_at(&minus)?) / (2.0 * eps))
    };

    let (traj, cache) = lqr_solve(&p).map_err(|e| CliError::Solver(e.to_string()))?;
    let duals = lqr_duals(&p, &traj);
    let grads = lqr_backward(&p, &traj, &duals, &grad_tau, &cache)
        .map_err(|e| CliError::Solver(e.to_string()))?;

    let mut quad_err = 0.0f64;
    let mut lin_err = 0.0f64;
    let mut mat_err = 0.0f64;
    let mut off_err = 0.0f64;
    for t in 0..horizon {
        for i in 0..ntau {
            for j in i..ntau {
                let fd = fd_of(&|q, h| {
                    q.cost_quad[t][(i, j)] += h;
                    if i != j {
                        q.cost_quad[t][(j, i)] += h;
                    }
                })?;
                let an = if i == j {
                    grads.d_cost_quad[t][(i, j)]
                } else {
                    2.0 * grads.d_cost_quad[t][(i, j)]
                };
                quad_err = quad_err.max(scalar_rel_err(fd, an));
            }
            let fd = fd_of(&|q, h| q.cost_lin[t][i] += h)?;
            lin_err = lin_err.max(scalar_rel_err(fd, grads.d_cost_lin[t][i]));
        }
        for i in 0..n {
            for j in 0..ntau {
                let fd = fd_of(&|q, h| q.dyn_mat[t][(i, j)] += h)?;
                mat_err = mat_err.max(scalar_rel_err(fd, grads.d_dyn_mat[t][(i, j)]));
            }
            let fd = fd_of(&|q, h| q.dyn_off[t][i] += h)?;
            off_err = off_err.max(scalar_rel_err(fd, grads.d_dyn_off[t][i]));
        }
    }
    let mut init_err = 0.0f64;
    for i in 0..n {
        let fd = fd_of(&|q, h| q.x_init[i] += h)?;
        init_err = init_err.max(scalar_rel_err(fd, grads.d_x_init[i]));
    }

    let blocks = vec![
        ("cost_quad".to_string(), quad_err),
        ("cost_lin".to_string(), lin_err),
        ("dyn_mat".to_string(), mat_err),
        ("dyn_off".to_string(), off_err),
        ("x_init".to_string(), init_err),
    ];
    let overall = blocks.iter().map(|(_, e)| *e).fold(0.0f64, f64::max);
    let threshold = 1e-4;
    Ok(GradcheckReport { env: "lqr", eps, threshold, blocks, overall, pass: overall <= threshold })
}
