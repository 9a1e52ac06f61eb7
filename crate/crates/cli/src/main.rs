use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use salab_cli::acceptance::{self, Fault, Options, Suite};
use salab_cli::analyze::{analyze, parse_window, read_curve};
use salab_cli::{run_experiment, ExperimentConfig, RunError};

#[derive(Parser)]
#[command(name = "salab", version, about = "Stochastic approximation experiments under Markovian noise")]
struct Cli {
    /// Worker threads for ensemble runs (defaults to the number of cores).
    #[arg(long, env = "SALAB_WORKERS", global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config.
    Run {
        config: PathBuf,
        /// Output directory; overrides the config's `output`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the acceptance suite.
    Accept {
        #[arg(value_enum)]
        suite: Suite,
        /// Also write a JUnit XML report here.
        #[arg(long)]
        junit: Option<PathBuf>,
        /// Inject a deliberate fault; the suite should then fail.
        #[arg(long, value_enum)]
        fault: Option<Fault>,
    },
    /// Fit a rate to a saved results.csv.
    Analyze {
        results: PathBuf,
        /// Fit window `lo:hi` in iterations.
        #[arg(long, value_parser = parse_window)]
        fit_window: (u64, u64),
        /// Fit log(error) against k instead of log(k).
        #[arg(long)]
        geometric: bool,
    },
}

fn fail(e: RunError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} workers: {e}");
            return ExitCode::from(1);
        }
    }
    match cli.command {
        Command::Run { config, out } => {
            let cfg = match ExperimentConfig::load(&config) {
                Ok(c) => c,
                Err(e) => return fail(e.into()),
            };
            let out = out.or_else(|| cfg.output.clone()).unwrap_or_else(|| PathBuf::from("results"));
            match run_experiment(&cfg, &out) {
                Ok(m) => {
                    println!("wrote {} ({} grid points, {:.1} s)", out.display(), m.grid_points, m.wall_time_seconds);
                    if let Some(f) = m.fit {
                        println!("last-decade slope {:.3} (r^2 {:.3})", f.slope, f.r_squared);
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::Accept { suite, junit, fault } => {
            let results = acceptance::run_suite(suite, &Options { fault }, |r| println!("{r}"));
            let failed = results.iter().filter(|r| !r.passed).count();
            if let Some(path) = junit {
                let name = format!("salab-acceptance-{suite:?}").to_lowercase();
                if let Err(e) = std::fs::write(&path, acceptance::junit_xml(&name, &results)) {
                    eprintln!("error: cannot write {}: {e}", path.display());
                    return ExitCode::from(1);
                }
            }
            println!("{} passed, {failed} failed", results.len() - failed);
            if failed == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Command::Analyze { results, fit_window, geometric } => {
            let fit = read_curve(&results).and_then(|c| analyze(&c, fit_window, geometric));
            match fit {
                Ok(f) => {
                    println!("{}", serde_json::to_string_pretty(&f).expect("fit serializes"));
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
    }
}
