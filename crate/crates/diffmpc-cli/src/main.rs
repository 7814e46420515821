//! Command-line front end: `run` executes a JSON-configured experiment into
//! an output directory, `gradcheck` spot-checks analytic gradients, and
//! `bench` times forward solves against backward passes.

mod bench;
mod config;
mod experiments;
mod gradcheck;
mod output;

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use config::CliError;
use gradcheck::GcEnvArg;

#[derive(Parser)]
#[command(name = "diffmpc", version, about = "Differentiable-MPC experiment runner")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an experiment described by a strict JSON config file.
    Run {
        /// Path to the experiment config.
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides DIFFMPC_OUT and the config's out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Master seed; overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare analytic gradients to central finite differences.
    Gradcheck {
        #[arg(long, value_enum)]
        env: GcEnvArg,
        /// Finite-difference step.
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
    /// Time forward solves and backward passes across iteration caps.
    Bench {
        /// Comma-separated forward-iteration caps.
        #[arg(long, value_delimiter = ',', default_value = "10,50,100")]
        caps: Vec<usize>,
        /// Timed repetitions per cap (after one discarded warmup).
        #[arg(long, default_value_t = bench::DEFAULT_TRIALS)]
        trials: usize,
        /// Optional directory for bench.csv; timing always prints to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.cmd {
        Cmd::Run { config, out, seed } => cmd_run(&config, out.as_deref(), seed),
        Cmd::Gradcheck { env, eps } => cmd_gradcheck(env, eps),
        Cmd::Bench { caps, trials, out } => cmd_bench(&caps, trials, out.as_deref()),
    };
    if let Err(e) = outcome {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn cmd_run(
    config_path: &Path,
    out_flag: Option<&Path>,
    seed_flag: Option<u64>,
) -> Result<(), CliError> {
    let mut cfg = config::load_config(config_path)?;
    if let Some(seed) = seed_flag {
        cfg.seed = seed;
    }
    let out = config::resolve_out_dir(out_flag, cfg.out_dir.as_deref())?;
    std::fs::create_dir_all(&out)?;
    cfg.out_dir = Some(out.to_string_lossy().into_owned());

    // echo the effective config first, so an aborted run still records what
    // it was asked to do
    let mut echo = serde_json::to_string_pretty(&cfg).expect("config serialization");
    echo.push('\n');
    std::fs::write(out.join("config.json"), echo)?;

    let t0 = Instant::now();
    let mut summary = experiments::run_experiment(&cfg, &out)?;
    summary.wall_clock_seconds = t0.elapsed().as_secs_f64();
    summary.write(&out.join("summary.json"))?;
    println!(
        "{}: finished in {:.1}s, results in {}",
        cfg.experiment.name(),
        summary.wall_clock_seconds,
        out.display()
    );
    if let Some(gc) = &summary.gradcheck {
        print_gradcheck(gc.env.as_str(), gc.eps, gc.threshold, gc.assembled_rel_error, gc.pass);
        if !gc.pass {
            return Err(CliError::Solver(format!(
                "gradient check failed: assembled relative error {:.3e} above {:.1e}",
                gc.assembled_rel_error, gc.threshold
            )));
        }
    }
    Ok(())
}

fn cmd_gradcheck(env: GcEnvArg, eps: f64) -> Result<(), CliError> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(CliError::Config("eps must be positive and finite".into()));
    }
    let spec = gradcheck::default_env(env);
    let report = gradcheck::gradcheck_for_env(&spec, eps)?;
    for (name, rel) in &report.blocks {
        println!("  {name:<14} rel {rel:.3e}");
    }
    print_gradcheck(report.env, report.eps, report.threshold, report.overall, report.pass);
    if report.pass {
        Ok(())
    } else {
        Err(CliError::Solver(format!(
            "gradient check failed: assembled relative error {:.3e} above {:.1e}",
            report.overall, report.threshold
        )))
    }
}

fn print_gradcheck(env: &str, eps: f64, threshold: f64, overall: f64, pass: bool) {
    println!(
        "gradcheck env={env} eps={eps:.1e}: assembled rel {overall:.3e} \
         (threshold {threshold:.1e}) -> {}",
        if pass { "pass" } else { "FAIL" }
    );
}

fn cmd_bench(caps: &[usize], trials: usize, out: Option<&Path>) -> Result<(), CliError> {
    if caps.is_empty() || caps.iter().any(|&c| c == 0) {
        return Err(CliError::Config("caps must be positive iteration counts".into()));
    }
    if trials == 0 {
        return Err(CliError::Config("trials must be positive".into()));
    }
    let env = bench::default_bench_env();
    let rows = bench::bench_rows(&env, caps, trials, 0)?;
    println!("env,n={},m={},T={}", rows[0].n_state, rows[0].n_ctrl, rows[0].horizon);
    println!("{:>5} {:>6} {:>24} {:>24}", "cap", "iters", "forward mean±std (s)", "backward mean±std (s)");
    for r in &rows {
        println!(
            "{:>5} {:>6} {:>14.6} ±{:>8.6} {:>14.6} ±{:>8.6}",
            r.cap, r.iters_used, r.forward_mean_s, r.forward_std_s, r.backward_mean_s,
            r.backward_std_s
        );
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        output::write_bench_csv(&dir.join("bench.csv"), &rows)?;
        println!("wrote {}", dir.join("bench.csv").display());
    }
    Ok(())
}
