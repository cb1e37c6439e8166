//! Command-line front end: spiral dataset generation, online training with
//! forward-mode gradients, oracle-backed gradient verification, cost
//! benchmarking across backends, and plot-ready report merging.
//!
//! Exit codes: 0 on success, 1 when a verification or runtime check fails,
//! 2 on usage errors (including flag parsing).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sparse_rtrl::driver::{
    parse_config_file, run_bench, run_gen_data, run_grad_check, run_report, run_train,
    write_bench_report, Activity, BackendChoice, BenchConfig, DriverError, RunConfig,
};

#[derive(Parser)]
#[command(
    name = "sparse-rtrl",
    about = "Exact online gradients for activity- and parameter-sparse recurrent networks",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a spiral classification dataset as JSON lines.
    GenData(GenDataArgs),
    /// Train a recurrent classifier, streaming one metrics row per iteration.
    Train(Box<TrainArgs>),
    /// Check sparse gradients against dense, reverse-mode, and finite-difference oracles.
    GradCheck(GradCheckArgs),
    /// Measure influence-propagation cost across backends and sparsity levels.
    Bench(BenchArgs),
    /// Merge metrics CSVs from repeated runs into per-panel mean/stderr files.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of spiral samples to generate.
    #[arg(long, default_value_t = 10_000)]
    count: usize,
    /// Points per spiral (timesteps).
    #[arg(long, default_value_t = 17)]
    t: usize,
    /// Dataset seed; the same seed always produces the same file.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Standard deviation of Gaussian jitter added to every point.
    #[arg(long, default_value_t = 0.0)]
    noise_sigma: f64,
    /// Output path for the JSON-lines dataset.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Optional flat `key = value` config file; explicit flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Hidden units.
    #[arg(long)]
    n: Option<usize>,
    /// Input dimensions per step.
    #[arg(long)]
    n_in: Option<usize>,
    /// Output classes.
    #[arg(long)]
    n_out: Option<usize>,
    /// Timesteps per sequence; must match the dataset.
    #[arg(long)]
    t: Option<usize>,
    /// Sequences per batch.
    #[arg(long)]
    batch: Option<usize>,
    /// Training iterations (one batch each).
    #[arg(long)]
    iters: Option<usize>,
    /// Run seed; `--repeats R` uses seed, seed+1, …, seed+R−1.
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of parameters pruned by the fixed random mask, in [0, 1).
    #[arg(long)]
    omega: Option<f64>,
    /// `on` = threshold cell with event sparsity, `off` = dense tanh cell.
    #[arg(long)]
    activity: Option<Activity>,
    /// Influence-propagation backend: `dense`, `masked`, or `sparse`.
    #[arg(long)]
    backend: Option<BackendChoice>,
    /// Pseudo-derivative height γ.
    #[arg(long)]
    gamma: Option<f64>,
    /// Pseudo-derivative support half-width ε (slope is zero at |v| ≥ 2ε).
    #[arg(long)]
    epsilon: Option<f64>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Independent repeats; >1 also emits a mean/stderr aggregate CSV.
    #[arg(long)]
    repeats: Option<usize>,
    /// JSON-lines dataset produced by `gen-data`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Metrics CSV path; repeats write `<stem>.seed<S>.csv` alongside it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Random instances per (n, T, ω) cell of the sweep.
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    /// Base seed for the sweep's case generator.
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    /// Hidden units of the probe network.
    #[arg(long, default_value_t = 16)]
    n: usize,
    /// Timesteps per probe episode.
    #[arg(long, default_value_t = 17)]
    t: usize,
    /// Probe seed (network weights, mask layout, and inputs).
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Probe episodes per configuration.
    #[arg(long, default_value_t = 64)]
    episodes: usize,
    /// Wall-clock repetitions; the minimum is reported.
    #[arg(long, default_value_t = 3)]
    wall_repeats: usize,
    /// Optional file for the report; stdout gets it either way.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Metrics CSVs from `train` runs with compatible configurations.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Directory for the per-panel CSVs (created if missing).
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(command: Command) -> Result<(), DriverError> {
    match command {
        Command::GenData(a) => {
            let outcome = run_gen_data(a.count, a.t, a.seed, a.noise_sigma, &a.out)?;
            println!(
                "wrote {} samples to {}",
                outcome.count,
                outcome.path.display()
            );
            println!("dataset sha256: {}", outcome.sha256);
            Ok(())
        }
        Command::Train(a) => {
            let cfg = build_run_config(*a)?;
            let outcome = run_train(&cfg)?;
            println!("dataset sha256: {}", outcome.dataset_sha256);
            for run in &outcome.runs {
                let s = &run.summary;
                let converged = match s.converged_iteration {
                    Some(i) => format!("reached 0.90 at iteration {i}"),
                    None => "did not reach 0.90".to_string(),
                };
                println!(
                    "seed {}: best accuracy {:.4} (iteration {}), {}, final loss {:.6} -> {}",
                    s.seed,
                    s.best_accuracy,
                    s.best_accuracy_iteration,
                    converged,
                    s.final_loss,
                    run.csv_path.display()
                );
            }
            if outcome.runs.len() > 1 {
                println!(
                    "aggregate: best accuracy {:.4} ± {:.4} (stderr), {}/{} runs converged",
                    outcome.aggregate.best_accuracy_mean,
                    outcome.aggregate.best_accuracy_stderr,
                    outcome.aggregate.runs_converged,
                    outcome.runs.len()
                );
            }
            println!("summary: {}", outcome.summary_path.display());
            Ok(())
        }
        Command::GradCheck(a) => {
            if a.seeds == 0 {
                return Err(DriverError::Usage("--seeds must be at least 1".into()));
            }
            let report = run_grad_check(a.seeds, a.seed);
            println!(
                "backend equivalence: {} cases, reverse-mode replay: {} cases, \
                 finite differences: {} cases, fully-pruned zero-gradient: {} cases",
                report.equivalence_cases,
                report.bptt_cases,
                report.fd_cases,
                report.zero_grad_cases
            );
            if report.failures.is_empty() {
                println!("all gradient checks passed");
                Ok(())
            } else {
                for f in &report.failures {
                    eprintln!("FAIL: {f}");
                }
                Err(DriverError::Failed(format!(
                    "{} gradient check(s) failed",
                    report.failures.len()
                )))
            }
        }
        Command::Bench(a) => {
            if a.episodes == 0 || a.wall_repeats == 0 {
                return Err(DriverError::Usage(
                    "--episodes and --wall-repeats must be at least 1".into(),
                ));
            }
            if a.n == 0 || a.t == 0 {
                return Err(DriverError::Usage("--n and --t must be at least 1".into()));
            }
            let cfg = BenchConfig {
                n: a.n,
                t: a.t,
                seed: a.seed,
                episodes: a.episodes,
                wall_repeats: a.wall_repeats,
            };
            let report = run_bench(&cfg);
            let text = write_bench_report(&report, a.out.as_deref())?;
            print!("{text}");
            if let Some(out) = &a.out {
                println!("report written to {}", out.display());
            }
            Ok(())
        }
        Command::Report(a) => {
            let outcome = run_report(&a.inputs, &a.out)?;
            println!("merged {} runs", outcome.runs_merged);
            for panel in &outcome.panels {
                println!("panel: {}", panel.display());
            }
            Ok(())
        }
    }
}

/// Defaults, then the config file, then explicit flags — later wins.
fn build_run_config(a: TrainArgs) -> Result<RunConfig, DriverError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &a.config {
        for (key, value) in parse_config_file(path)? {
            cfg.apply_kv(&key, &value)?;
        }
    }
    if let Some(v) = a.n {
        cfg.n = v;
    }
    if let Some(v) = a.n_in {
        cfg.n_in = v;
    }
    if let Some(v) = a.n_out {
        cfg.n_out = v;
    }
    if let Some(v) = a.t {
        cfg.t = v;
    }
    if let Some(v) = a.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = a.iters {
        cfg.iterations = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.omega {
        cfg.omega = v;
    }
    if let Some(v) = a.activity {
        cfg.activity = v;
    }
    if let Some(v) = a.backend {
        cfg.backend = v;
    }
    if let Some(v) = a.gamma {
        cfg.gamma = v;
    }
    if let Some(v) = a.epsilon {
        cfg.epsilon = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.repeats {
        cfg.repeats = v;
    }
    if let Some(v) = a.data {
        cfg.data = v;
    }
    if let Some(v) = a.out {
        cfg.out = v;
    }
    cfg.validate()?;
    Ok(cfg)
}
