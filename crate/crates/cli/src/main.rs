use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ctrldiffuse_cli::commands;
use ctrldiffuse_cli::config::{self, SEED_ENV};
use ctrldiffuse_cli::{CliError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "ctrldiffuse", version, about = "Sampled, quantized Q-learning for controlled diffusions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; beats the config file and the CTRLDIFFUSE_SEED variable.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Per-key config overrides, `--key value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run Q-learning on the sampled diffusion.
    Learn(Common),
    /// Estimate the finite MDP and solve it by value iteration.
    Solve(Common),
    /// Estimate the performance gap of a learned control.
    Evaluate {
        /// Q values to evaluate (qtable.csv or qstar.csv); defaults to OUT/qtable.csv.
        #[arg(long)]
        q: Option<PathBuf>,
        /// Compare against this Q instead of the refined reference.
        #[arg(long)]
        reference_q: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Tabulate error bounds and sample complexities.
    Bounds(Common),
    /// Run the pipeline over a grid of h and eps values.
    Sweep(Common),
    /// Check Wasserstein-Lipschitz constants of the sampled kernel.
    WassersteinCheck(Common),
    /// Check the hashes recorded in a manifest.
    Verify { manifest: PathBuf },
}

fn load(common: &Common) -> Result<ExperimentConfig, CliError> {
    let env = std::env::var(SEED_ENV).ok();
    let mut cfg = config::load(common.config.as_deref(), &common.overrides, env.as_deref(), common.seed)?;
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn with_pool<T: Send>(common: &Common, f: impl FnOnce() -> Result<T, CliError> + Send) -> Result<T, CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(CliError::Validation("--threads must be at least 1".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| CliError::Validation(format!("thread pool: {e}")))?;
    pool.install(f)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Learn(c) => {
            let cfg = load(&c)?;
            let m = with_pool(&c, || commands::cmd_learn(&cfg))?;
            println!("wrote {} files to {}", m.artifacts.len() + 1, cfg.out.display());
        }
        Command::Solve(c) => {
            let cfg = load(&c)?;
            let m = with_pool(&c, || commands::cmd_solve(&cfg))?;
            println!("wrote {} files to {}", m.artifacts.len() + 1, cfg.out.display());
        }
        Command::Evaluate { q, reference_q, common } => {
            let cfg = load(&common)?;
            let (_, r) = with_pool(&common, || commands::cmd_evaluate(&cfg, q.as_deref(), reference_q.as_deref()))?;
            println!(
                "gap {:.6e} +- {:.2e} (learned {:.6e}, reference {:.6e}), bound {:.6e}{}",
                r.gap,
                r.gap_se,
                r.w_learned,
                r.w_reference,
                r.bound_total,
                if r.violation { "  VIOLATION" } else { "" }
            );
        }
        Command::Bounds(c) => {
            let cfg = load(&c)?;
            let (_, rows) = with_pool(&c, || commands::cmd_bounds(&cfg))?;
            print!("{}", commands::format_bounds_table(&rows));
        }
        Command::Sweep(c) => {
            let cfg = load(&c)?;
            let out = with_pool(&c, || commands::cmd_sweep(&cfg))?;
            println!("{} cells, {} failed; wrote {}", out.rows.len(), out.failed, cfg.out.join("sweep.csv").display());
            if out.failed > 0 {
                return Err(CliError::PartialSweep { failed: out.failed, total: out.rows.len() });
            }
        }
        Command::WassersteinCheck(c) => {
            let cfg = load(&c)?;
            let (_, rows) = with_pool(&c, || commands::cmd_wasserstein(&cfg))?;
            let failed = rows.iter().filter(|r| !r.pass).count();
            println!("{} pairs checked, {failed} above bound", rows.len());
        }
        Command::Verify { manifest } => {
            if ctrldiffuse_cli::manifest::verify(&manifest)? {
                println!("all hashes match");
            } else {
                return Err(CliError::Validation("manifest hashes do not match the files".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
