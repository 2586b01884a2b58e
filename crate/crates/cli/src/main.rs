use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedco::harness::{self, ExperimentConfig, TheoryArgs};
use fedco::numerics::gradcheck::{run_gradcheck, GradcheckOptions, MAX_REL_ERR};
use fedco::numerics::OpKind;
use fedco::Error;

#[derive(Parser)]
#[command(name = "fedco", version, about = "Federated online/offline cooperation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a federated experiment from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override a config key, e.g. `--set federation.rounds=10`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check the Gram-matrix eigenvalue ordering and train loss trajectories.
    Theory {
        #[arg(long, default_value_t = 3)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        m: usize,
        #[arg(long, default_value_t = 5)]
        d: usize,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long, default_value_t = 100_000)]
        mc: usize,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Hidden width of the trained networks.
        #[arg(long, default_value_t = 512)]
        width: usize,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        /// Step size (default: 0.05 over the largest Gauss-Newton eigenvalue).
        #[arg(long)]
        lr: Option<f64>,
        /// Number of trajectory instances.
        #[arg(long, default_value_t = 10)]
        traj_trials: usize,
    },
    /// Finite-difference check of every differentiable primitive.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Negate one primitive's analytic gradient (test fixture).
        #[arg(long, hide = true)]
        flip_sign: Option<String>,
    },
}

fn execute(cmd: Command) -> Result<bool, Error> {
    match cmd {
        Command::Run { config, set, out } => {
            let cfg = ExperimentConfig::load(&config, &set)?;
            let res = harness::run(&cfg, &out)?;
            for (mode, acc) in &res.summary.final_accuracy {
                println!("final {mode} accuracy {:.4}", acc);
            }
            println!("wrote {} rows to {}", res.reports.len(), out.join("metrics.csv").display());
            Ok(true)
        }
        Command::Theory { n, m, d, alpha, mc, trials, seed, out, width, steps, lr, traj_trials } => {
            let args = TheoryArgs { n, m, d, alpha, mc, trials, seed, width, steps, lr, traj_trials };
            let res = harness::theory(&args, &out)?;
            let t = &res.gram_check;
            println!("eigenvalue ordering held in {}/{} trials", t.passed, t.trials.len());
            println!(
                "ensemble loss <= online loss in {}/{} trajectories",
                res.trajectories.fedco2_le_online, res.trajectories.instances
            );
            Ok(true)
        }
        Command::Gradcheck { seed, flip_sign } => {
            let flip = match flip_sign {
                Some(name) => Some(
                    OpKind::from_name(&name).ok_or_else(|| Error::Config(format!("unknown primitive `{name}`")))?,
                ),
                None => None,
            };
            let report = run_gradcheck(&GradcheckOptions { seed, flip_sign: flip, ..GradcheckOptions::default() })?;
            for r in &report.results {
                println!("{:<28} {:.3e}", r.check, r.max_rel_err);
            }
            println!("max relative error {:.3e} (worst: {})", report.max_rel_err, report.worst);
            if !report.passed {
                eprintln!("gradient check failed: {} exceeds {MAX_REL_ERR:e}", report.worst);
            }
            Ok(report.passed)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = harness::thread_pool().and_then(|pool| pool.install(|| execute(cli.command)));
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(harness::exit_code(&e) as u8)
        }
    }
}
