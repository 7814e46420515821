//! The training experiments behind `run`: expert construction, dataset
//! generation, per-trial training, and result collection.

use std::path::Path;

use diffmpc::envs::{Cartpole, GoalCost, LinearDyn, Pendulum, QuadCost};
use diffmpc::imitation::{
    generate_dataset, goal_cost_from_params, goal_cost_params, imitation_eval,
    sample_cartpole_state, sample_pendulum_state, sysid_loss, train_lqr_dx, train_mpc_cost,
    train_mpc_cost_dx, train_mpc_dx, train_sysid, transitions_of, Controller, ImitationError,
    LossKind, Method, TrainConfig, TrainResult,
};
use diffmpc::mpc::ParamDyn;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{
    CliError, DatasetSpec, EnvSpec, Experiment, ExperimentConfig, MethodSpec, TrainSpec,
};
use crate::output::{trial_summary, write_curves, ModelEval, Summary, TrialCompare};

pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<Summary, CliError> {
    match cfg.experiment {
        Experiment::LqrImitate => run_lqr_imitate(cfg, out),
        Experiment::MpcImitate => run_mpc_imitate(cfg, out),
        Experiment::SysidCompare => run_sysid_compare(cfg, out),
        Experiment::BenchBackward => crate::bench::run_bench_experiment(cfg, out),
        Experiment::Gradcheck => crate::gradcheck::run_gradcheck_experiment(cfg),
    }
}

/// Goal cost used for pendulum experiments: drive the embedded angle to the
/// upright point with small velocity and control penalties.
pub fn pendulum_default_cost() -> GoalCost {
    GoalCost::new(
        DVector::from_vec(vec![0.5, 0.5, 0.05, 0.1]),
        DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0]),
    )
}

/// Goal cost used for cartpole experiments: upright pole, loose position
/// and velocity terms.
pub fn cartpole_default_cost() -> GoalCost {
    GoalCost::new(
        DVector::from_vec(vec![0.05, 0.05, 0.5, 0.5, 0.05, 0.1]),
        DVector::from_vec(vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0]),
    )
}

pub(crate) fn uniform_mat(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    scale: f64,
) -> DMatrix<f64> {
    let data: Vec<f64> =
        (0..rows * cols).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
    DMatrix::from_row_slice(rows, cols, &data)
}

fn ctrl_bounds(n_ctrl: usize, bound: f64) -> (DVector<f64>, DVector<f64>) {
    (
        DVector::from_element(n_ctrl, -bound),
        DVector::from_element(n_ctrl, bound),
    )
}

/// Learner initialization: every true parameter scaled by an independent
/// uniform factor in `[0.75, 1.25)`.
fn perturb_params(rng: &mut ChaCha8Rng, truth: &[f64]) -> Vec<f64> {
    truth.iter().map(|p| p * rng.gen_range(0.75..1.25)).collect()
}

fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_add(10_000 + trial as u64))
}

fn train_seed(seed: u64, trial: usize) -> u64 {
    seed.wrapping_add(100 + trial as u64)
}

fn train_config(spec: &TrainSpec, method: Method, seed: u64) -> TrainConfig {
    TrainConfig {
        method,
        optimizer: spec.optimizer.to_optimizer(),
        batch_size: spec.batch_size,
        epochs: spec.epochs,
        alternation_period: spec.alternation_period,
        seed,
    }
}

/// Runs one training call and writes its curve file; on an abort, whatever
/// epochs completed are still written before the error propagates.
fn run_and_write(
    path: &Path,
    train: impl FnOnce() -> Result<TrainResult, ImitationError>,
) -> Result<TrainResult, CliError> {
    match train() {
        Ok(res) => {
            write_curves(path, &res.curves)?;
            Ok(res)
        }
        Err(e) => {
            write_curves(path, e.partial_curves())?;
            Err(CliError::Train(e))
        }
    }
}

fn run_lqr_imitate(cfg: &ExperimentConfig, out: &Path) -> Result<Summary, CliError> {
    let EnvSpec::Lqr(env) = &cfg.env else { unreachable!("validated") };
    let spec = cfg.train.as_ref().expect("validated");
    let data = cfg.dataset.as_ref().expect("validated");
    let trials = cfg.trials.unwrap_or(4);
    let (n, m) = (env.n_state, env.n_ctrl);
    let (lo, hi) = ctrl_bounds(m, env.ctrl_bound);

    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let a_true = uniform_mat(&mut master, n, n, 0.5);
    let b_true = uniform_mat(&mut master, n, m, 1.0);
    let mut expert = Controller::new(
        LinearDyn::new(a_true, b_true),
        QuadCost::identity(n + m),
        env.horizon,
        lo.clone(),
        hi.clone(),
    );
    expert.convergence_tol = 1e-9;
    expert.max_iters = 100;
    let expert_params = expert.dynamics.params();

    let dataset = generate_dataset(&expert, data.sizes(), cfg.seed, |rng| {
        DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0))
    })?;

    let mut summary = Summary::new(cfg.experiment.name(), cfg.seed);
    for k in 0..trials {
        let mut init = trial_rng(cfg.seed, k);
        let a0 = uniform_mat(&mut init, n, n, 0.5);
        let b0 = uniform_mat(&mut init, n, m, 1.0);
        let mut learner = Controller::new(
            LinearDyn::new(a0, b0),
            QuadCost::identity(n + m),
            env.horizon,
            lo.clone(),
            hi.clone(),
        );
        learner.convergence_tol = expert.convergence_tol;
        learner.max_iters = expert.max_iters;
        let tcfg = train_config(spec, Method::LqrDx, train_seed(cfg.seed, k));
        let path = out.join(format!("curves_trial{k}.csv"));
        let res = run_and_write(&path, || {
            train_lqr_dx(learner, expert_params.clone(), &dataset, &tcfg)
        })?;
        summary.trials.push(trial_summary(k, spec.method.name(), &res));
    }
    Ok(summary)
}

fn run_mpc_imitate(cfg: &ExperimentConfig, out: &Path) -> Result<Summary, CliError> {
    let spec = cfg.train.as_ref().expect("validated");
    let data = cfg.dataset.as_ref().expect("validated");
    let trials = cfg.trials.unwrap_or(4);
    let mut summary = Summary::new(cfg.experiment.name(), cfg.seed);
    match &cfg.env {
        EnvSpec::Pendulum(p) => {
            let dynamics = Pendulum::new(p.mass, p.length, p.gravity)
                .with_damping(p.damping)
                .with_wind(p.wind);
            mpc_imitate_trials(
                cfg,
                spec,
                data,
                trials,
                dynamics,
                pendulum_default_cost(),
                sample_pendulum_state,
                out,
                &mut summary,
            )?;
        }
        EnvSpec::Cartpole(c) => {
            let dynamics = Cartpole::new(c.cart_mass, c.pole_mass, c.gravity, c.length);
            mpc_imitate_trials(
                cfg,
                spec,
                data,
                trials,
                dynamics,
                cartpole_default_cost(),
                sample_cartpole_state,
                out,
                &mut summary,
            )?;
        }
        EnvSpec::Lqr(_) => unreachable!("validated"),
    }
    Ok(summary)
}

#[allow(clippy::too_many_arguments)]
fn mpc_imitate_trials<D: ParamDyn>(
    cfg: &ExperimentConfig,
    spec: &TrainSpec,
    data: &DatasetSpec,
    trials: usize,
    expert_dyn: D,
    expert_cost: GoalCost,
    sampler: fn(&mut ChaCha8Rng) -> DVector<f64>,
    out: &Path,
    summary: &mut Summary,
) -> Result<(), CliError> {
    let horizon = cfg.env.horizon();
    let (lo, hi) = ctrl_bounds(expert_dyn.n_ctrl(), cfg.env.ctrl_bound());
    let expert = Controller::new(
        expert_dyn.clone(),
        expert_cost.clone(),
        horizon,
        lo.clone(),
        hi.clone(),
    );
    let dataset = generate_dataset(&expert, data.sizes(), cfg.seed, sampler)?;
    let dyn_truth = expert_dyn.params();
    let cost_truth = goal_cost_params(&expert_cost);

    for k in 0..trials {
        let mut init = trial_rng(cfg.seed, k);
        let tseed = train_seed(cfg.seed, k);
        let path = out.join(format!("curves_trial{k}.csv"));
        match spec.method {
            MethodSpec::MpcDx => {
                let init_dyn = expert_dyn.with_params(&perturb_params(&mut init, &dyn_truth));
                let learner = Controller::new(
                    init_dyn,
                    expert_cost.clone(),
                    horizon,
                    lo.clone(),
                    hi.clone(),
                );
                let tcfg = train_config(spec, Method::MpcDx, tseed);
                let res = run_and_write(&path, || {
                    train_mpc_dx(learner, dyn_truth.clone(), &dataset, &tcfg)
                })?;
                summary.trials.push(trial_summary(k, spec.method.name(), &res));
            }
            MethodSpec::MpcCost => {
                let init_cost =
                    goal_cost_from_params(&perturb_params(&mut init, &cost_truth));
                let learner = Controller::new(
                    expert_dyn.clone(),
                    init_cost,
                    horizon,
                    lo.clone(),
                    hi.clone(),
                );
                let tcfg = train_config(spec, Method::MpcCost, tseed);
                let res = run_and_write(&path, || {
                    train_mpc_cost(learner, Some(cost_truth.clone()), &dataset, &tcfg)
                })?;
                summary.trials.push(trial_summary(k, spec.method.name(), &res));
            }
            MethodSpec::MpcCostDx => {
                let init_dyn = expert_dyn.with_params(&perturb_params(&mut init, &dyn_truth));
                let init_cost =
                    goal_cost_from_params(&perturb_params(&mut init, &cost_truth));
                let learner =
                    Controller::new(init_dyn, init_cost, horizon, lo.clone(), hi.clone());
                let mut truth = dyn_truth.clone();
                truth.extend_from_slice(&cost_truth);
                let tcfg = train_config(spec, Method::MpcCostDx, tseed);
                let res = run_and_write(&path, || {
                    train_mpc_cost_dx(learner, Some(truth), &dataset, &tcfg)
                })?;
                summary.trials.push(trial_summary(k, spec.method.name(), &res));
            }
            MethodSpec::Sysid => {
                let init_params = perturb_params(&mut init, &dyn_truth);
                let init_dyn = expert_dyn.with_params(&init_params);
                let tcfg = train_config(spec, Method::Sysid, tseed);
                let res = run_and_write(&path, || {
                    train_sysid(init_dyn, dyn_truth.clone(), &dataset, &tcfg)
                })?;
                let mut row = trial_summary(k, spec.method.name(), &res);
                // sysid never consults the controller while training; report
                // how its model imitates when plugged back into one
                let imitation_at = |params: &[f64]| -> Result<f64, CliError> {
                    let ctrl = Controller::new(
                        expert_dyn.with_params(params),
                        expert_cost.clone(),
                        horizon,
                        lo.clone(),
                        hi.clone(),
                    );
                    Ok(imitation_eval(&ctrl, &dataset.test, LossKind::ControlsOnly, 0)?.0)
                };
                row.imitation_test_initial = Some(imitation_at(&init_params)?);
                row.imitation_test_at_best = Some(imitation_at(&res.best_params)?);
                summary.trials.push(row);
            }
            MethodSpec::LqrDx => unreachable!("validated"),
        }
    }
    Ok(())
}

fn run_sysid_compare(cfg: &ExperimentConfig, out: &Path) -> Result<Summary, CliError> {
    let EnvSpec::Pendulum(p) = &cfg.env else { unreachable!("validated") };
    let spec = cfg.train.as_ref().expect("validated");
    let data = cfg.dataset.as_ref().expect("validated");
    let trials = cfg.trials.unwrap_or(1);
    let horizon = cfg.env.horizon();
    let (lo, hi) = ctrl_bounds(1, p.ctrl_bound);

    let expert_dyn = Pendulum::new(p.mass, p.length, p.gravity)
        .with_damping(p.damping)
        .with_wind(p.wind);
    let cost = pendulum_default_cost();
    let expert =
        Controller::new(expert_dyn.clone(), cost.clone(), horizon, lo.clone(), hi.clone());
    let dataset = generate_dataset(&expert, data.sizes(), cfg.seed, sample_pendulum_state)?;
    let truth = expert_dyn.params();
    let test_transitions = transitions_of(&dataset.test);

    // the learner class drops damping and wind, so a nonzero setting makes
    // the expert unrealizable for both arms
    let base = Pendulum::new(p.mass, p.length, p.gravity);

    let mut summary = Summary::new(cfg.experiment.name(), cfg.seed);
    for k in 0..trials {
        let mut init = trial_rng(cfg.seed, k);
        let init_params = perturb_params(&mut init, &truth);
        let init_dyn = base.with_params(&init_params);

        let sysid_cfg = train_config(
            spec,
            Method::Sysid,
            cfg.seed.wrapping_add(100 + 2 * k as u64),
        );
        let sysid_path = out.join(format!("curves_sysid_trial{k}.csv"));
        let sysid_res = run_and_write(&sysid_path, || {
            train_sysid(init_dyn.clone(), truth.clone(), &dataset, &sysid_cfg)
        })?;

        let dx_cfg = train_config(
            spec,
            Method::MpcDx,
            cfg.seed.wrapping_add(101 + 2 * k as u64),
        );
        let learner =
            Controller::new(init_dyn, cost.clone(), horizon, lo.clone(), hi.clone());
        let dx_path = out.join(format!("curves_mpc_dx_trial{k}.csv"));
        let dx_res =
            run_and_write(&dx_path, || train_mpc_dx(learner, truth.clone(), &dataset, &dx_cfg))?;

        let eval_model = |params: &[f64]| -> Result<ModelEval, CliError> {
            let model = base.with_params(params);
            let ctrl =
                Controller::new(model.clone(), cost.clone(), horizon, lo.clone(), hi.clone());
            Ok(ModelEval {
                params: params.to_vec(),
                sysid_test_loss: sysid_loss(&model, &test_transitions),
                imitation_test_loss: imitation_eval(
                    &ctrl,
                    &dataset.test,
                    LossKind::ControlsOnly,
                    0,
                )?
                .0,
            })
        };
        summary.trials.push(trial_summary(k, "sysid", &sysid_res));
        summary.trials.push(trial_summary(k, "mpc.dx", &dx_res));
        summary.compare.push(TrialCompare {
            trial: k,
            sysid_model: eval_model(&sysid_res.best_params)?,
            imitation_model: eval_model(&dx_res.best_params)?,
        });
    }
    Ok(summary)
}
