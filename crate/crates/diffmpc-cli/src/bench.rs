//! Wall-time benchmark: the forward solve does work proportional to its
//! iteration cap, while the backward pass is one extra LQR solve whatever
//! the cap was.

use std::path::Path;
use std::time::Instant;

use diffmpc::envs::{Cartpole, LinearDyn, Pendulum, QuadCost};
use diffmpc::mpc::{mpc_solve, CostModel, DynModel, MpcProblem};
use diffmpc::mpc_diff::mpc_backward;
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{CartpoleSpec, CliError, EnvSpec, ExperimentConfig};
use crate::experiments::uniform_mat;
use crate::output::{write_bench_csv, BenchRow, BenchSummary, Summary};

pub const DEFAULT_CAPS: &[usize] = &[10, 50, 100];
pub const DEFAULT_TRIALS: usize = 10;

/// Instance used by the bare `bench` subcommand: a tightly bounded cartpole
/// swing-up that keeps the solver busy well past 100 iterations.
pub fn default_bench_env() -> EnvSpec {
    EnvSpec::Cartpole(CartpoleSpec {
        cart_mass: 1.0,
        pole_mass: 0.1,
        gravity: 10.0,
        length: 0.5,
        horizon: 40,
        ctrl_bound: 1.3,
    })
}

fn mean_std(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    if samples.len() < 2 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One discarded warmup call, then `trials` timed samples on a monotonic
/// clock.
fn time_stats<T>(mut f: impl FnMut() -> T, trials: usize) -> (f64, f64) {
    std::hint::black_box(f());
    let mut samples = Vec::with_capacity(trials);
    for _ in 0..trials {
        let t0 = Instant::now();
        std::hint::black_box(f());
        samples.push(t0.elapsed().as_secs_f64());
    }
    mean_std(&samples)
}

#[allow(clippy::too_many_arguments)]
fn bench_instance<D: DynModel + Clone, C: CostModel + Clone>(
    env_name: &str,
    dynamics: D,
    cost: C,
    horizon: usize,
    x_init: DVector<f64>,
    bound: f64,
    caps: &[usize],
    trials: usize,
    seed: u64,
) -> Result<Vec<BenchRow>, CliError> {
    let (n, m) = (dynamics.n_state(), dynamics.n_ctrl());
    let lo = DVector::from_element(m, -bound);
    let hi = DVector::from_element(m, bound);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grad_tau: Vec<DVector<f64>> = (0..horizon)
        .map(|_| DVector::from_fn(n + m, |_, _| rng.gen_range(-1.0..1.0)))
        .collect();

    let mut rows = Vec::with_capacity(caps.len());
    for &cap in caps {
        let problem = MpcProblem::new(
            dynamics.clone(),
            cost.clone(),
            horizon,
            x_init.clone(),
            lo.clone(),
            hi.clone(),
        )
        .map_err(|e| CliError::Solver(e.to_string()))?
        .with_tol(1e-12)
        .with_max_iters(cap);

        let (forward_mean_s, forward_std_s) = time_stats(|| mpc_solve(&problem), trials);
        let mut fp = mpc_solve(&problem);
        let iters_used = fp.iters_used;
        // the backward pass costs the same at any iterate; mark the capped
        // one converged so it is accepted as a differentiation point
        fp.converged = true;
        let (backward_mean_s, backward_std_s) = time_stats(
            || mpc_backward(&problem, &fp, &grad_tau).expect("backward at the benchmark point"),
            trials,
        );
        rows.push(BenchRow {
            env: env_name.to_string(),
            n_state: n,
            n_ctrl: m,
            horizon,
            cap,
            iters_used,
            forward_mean_s,
            forward_std_s,
            backward_mean_s,
            backward_std_s,
        });
    }
    Ok(rows)
}

pub fn bench_rows(
    env: &EnvSpec,
    caps: &[usize],
    trials: usize,
    seed: u64,
) -> Result<Vec<BenchRow>, CliError> {
    match env {
        EnvSpec::Pendulum(p) => {
            let dynamics = Pendulum::new(p.mass, p.length, p.gravity)
                .with_damping(p.damping)
                .with_wind(p.wind);
            // near-hanging but off the symmetry axis: the exact bottom is a
            // stationary point where the solver would stop immediately
            let angle: f64 = 3.0;
            let x0 = DVector::from_vec(vec![angle.cos(), angle.sin(), 0.05]);
            bench_instance(
                "pendulum",
                dynamics,
                crate::experiments::pendulum_default_cost(),
                p.horizon,
                x0,
                p.ctrl_bound,
                caps,
                trials,
                seed,
            )
        }
        EnvSpec::Cartpole(c) => {
            let dynamics = Cartpole::new(c.cart_mass, c.pole_mass, c.gravity, c.length);
            let angle: f64 = 3.05;
            let x0 = DVector::from_vec(vec![0.0, 0.0, angle.cos(), angle.sin(), 0.05]);
            bench_instance(
                "cartpole",
                dynamics,
                crate::experiments::cartpole_default_cost(),
                c.horizon,
                x0,
                c.ctrl_bound,
                caps,
                trials,
                seed,
            )
        }
        EnvSpec::Lqr(l) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = uniform_mat(&mut rng, l.n_state, l.n_state, 0.5);
            let b = uniform_mat(&mut rng, l.n_state, l.n_ctrl, 1.0);
            let x0 = DVector::from_fn(l.n_state, |_, _| rng.gen_range(-1.0..1.0));
            bench_instance(
                "lqr",
                LinearDyn::new(a, b),
                QuadCost::identity(l.n_state + l.n_ctrl),
                l.horizon,
                x0,
                l.ctrl_bound,
                caps,
                trials,
                seed,
            )
        }
    }
}

pub fn bench_summary(rows: Vec<BenchRow>) -> BenchSummary {
    let min_cap = rows.iter().min_by_key(|r| r.cap).expect("caps are nonempty");
    let max_cap = rows.iter().max_by_key(|r| r.cap).expect("caps are nonempty");
    let forward_growth = max_cap.forward_mean_s / min_cap.forward_mean_s;
    let bwd_max = rows.iter().map(|r| r.backward_mean_s).fold(0.0f64, f64::max);
    let bwd_min = rows.iter().map(|r| r.backward_mean_s).fold(f64::INFINITY, f64::min);
    BenchSummary { rows, forward_growth, backward_spread: bwd_max / bwd_min }
}

pub fn run_bench_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<Summary, CliError> {
    let caps = cfg.caps.clone().unwrap_or_else(|| DEFAULT_CAPS.to_vec());
    let trials = cfg.trials.unwrap_or(DEFAULT_TRIALS);
    let rows = bench_rows(&cfg.env, &caps, trials, cfg.seed)?;
    write_bench_csv(&out.join("bench.csv"), &rows)?;
    let mut summary = Summary::new(cfg.experiment.name(), cfg.seed);
    summary.bench = Some(bench_summary(rows));
    Ok(summary)
}
