use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fieldinv::experiment::{
    check_comparable, gradcheck, run_experiment, write_comparison, ExperimentConfig, ExperimentResult,
    GRADCHECK_STEP, GRADCHECK_THRESHOLD,
};
use fieldinv::optim::Termination;
use fieldinv::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_SOLVER: u8 = 2;
const EXIT_GRADCHECK: u8 = 3;

/// Recover coefficient fields of PDE models from solution data.
#[derive(Parser)]
#[command(name = "fieldinv", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Override the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Override the optimizer's iteration limit.
    #[arg(long, global = true)]
    max_iter: Option<usize>,
    /// Print progress and keep a Newton residual log.
    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run one inverse experiment.
    Run { config: PathBuf },
    /// Check the configured gradient against finite differences.
    Gradcheck {
        config: PathBuf,
        #[arg(long, default_value_t = 10)]
        directions: usize,
        /// Finite-difference step along each unit direction.
        #[arg(long, default_value_t = GRADCHECK_STEP)]
        step: f64,
        /// Scale the analytic gradient by 2 to exercise the checker.
        #[arg(long)]
        corrupt_gradient: bool,
    },
    /// Run two experiments on the same problem and tabulate both.
    Compare { a: PathBuf, b: PathBuf },
}

enum Failure {
    Usage(String),
    Solver(String),
    Gradcheck(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_solver_failure() {
            Failure::Solver(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn load(cli: &Cli, path: &Path) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.output_dir = dir.clone();
    }
    if let Some(n) = cli.max_iter {
        cfg.optimizer.max_iter = Some(n);
    }
    Ok(cfg)
}

fn summary(r: &ExperimentResult) -> String {
    format!(
        "{} {}: loss {:e} -> {:e}, rel L2 error {:.4}, max abs error {:.4}, {} iterations, {} ({:.1}s)",
        r.problem,
        r.parameterization,
        r.initial_loss,
        r.final_loss,
        r.rel_l2_error,
        r.max_abs_error,
        r.iterations,
        r.termination,
        r.wall_time
    )
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Run { config } => {
            let cfg = load(cli, config)?;
            let r = run_experiment(&cfg, cli.verbose)?;
            println!("{}", summary(&r));
            println!("outputs in {}", cfg.output_dir.display());
            if r.termination == Termination::SolverFailure {
                return Err(Failure::Solver(r.failure.unwrap_or_default()));
            }
            Ok(())
        }
        Command::Gradcheck {
            config,
            directions,
            step,
            corrupt_gradient,
        } => {
            let cfg = load(cli, config)?;
            let report = gradcheck(&cfg, *directions, *step, *corrupt_gradient)?;
            for (k, d) in report.directions.iter().enumerate() {
                match &d.failure {
                    Some(msg) => println!("direction {k}: failed ({msg})"),
                    None if cli.verbose => println!(
                        "direction {k}: fd {:e} analytic {:e} rel {:e}",
                        d.finite_difference, d.analytic, d.rel_error
                    ),
                    None => {}
                }
            }
            println!("max relative error {:e} (threshold {GRADCHECK_THRESHOLD:e})", report.max_rel_error);
            if report.directions.iter().any(|d| d.failure.is_some()) {
                return Err(Failure::Solver("objective failed at a perturbed point".into()));
            }
            if !(report.max_rel_error <= GRADCHECK_THRESHOLD) {
                return Err(Failure::Gradcheck("gradient check failed".into()));
            }
            println!("pass");
            Ok(())
        }
        Command::Compare { a, b } => {
            let mut ca = load(cli, a)?;
            let mut cb = load(cli, b)?;
            check_comparable(&ca, &cb)?;
            let base = cli.out_dir.clone().unwrap_or_else(|| PathBuf::from("compare"));
            ca.output_dir = base.join("a");
            cb.output_dir = base.join("b");
            let ra = run_experiment(&ca, cli.verbose)?;
            println!("a: {}", summary(&ra));
            let rb = run_experiment(&cb, cli.verbose)?;
            println!("b: {}", summary(&rb));
            fs::create_dir_all(&base)?;
            let mut w = BufWriter::new(fs::File::create(base.join("compare.csv"))?);
            write_comparison(&mut w, &[("a", &ra), ("b", &rb)])?;
            w.flush()?;
            println!("table in {}", base.join("compare.csv").display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Solver(msg)) => {
            eprintln!("solver failure: {msg}");
            ExitCode::from(EXIT_SOLVER)
        }
        Err(Failure::Gradcheck(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(EXIT_GRADCHECK)
        }
    }
}
