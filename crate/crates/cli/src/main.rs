use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hjbfl::experiment::{with_threads, Experiment, RunConfig};
use hjbfl::metrics::format_percent;

#[derive(Parser, Debug)]
#[command(name = "hjbfl", version, about = "Learn finite-horizon feedback laws from value-function surrogates")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (TOML)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory, overriding `output_dir` from the config
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Seed, overriding `seed` from the config
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Recompute artifacts even when cached copies exist
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Build and cache the problem data
    Assemble,
    /// Sample the initial-condition ensemble
    Ensemble,
    /// Train one model per configured penalty
    Train,
    /// Solve the open-loop reference problems
    Oracle,
    /// Compute validation metrics on both splits
    Validate,
    /// Write the metric tables
    Report,
    /// Check the ensemble gradient against finite differences
    Gradcheck {
        /// Number of random directions
        #[arg(long)]
        dirs: Option<usize>,
    },
    /// Run every stage from assemble to report
    Run,
}

enum Outcome {
    Ok,
    Failed(String),
}

fn run(cli: &Cli) -> hjbfl::Result<Outcome> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| hjbfl::Error::Config("--config <file> is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    let threads = cfg.effective_threads()?;
    let mut exp = Experiment::new(cfg)?;
    exp.force = cli.force;
    log::info!("using {threads} worker thread(s), output in {}", exp.out.display());
    let command = cli.command;
    with_threads(threads, move || dispatch(&exp, command))?
}

fn dispatch(exp: &Experiment, command: Command) -> hjbfl::Result<Outcome> {
    match command {
        Command::Assemble => {
            exp.assemble()?;
            println!("{}", exp.problem_path().display());
        }
        Command::Ensemble => {
            let set = exp.ensemble()?;
            println!("{} ({} points)", exp.ensemble_path().display(), set.len());
        }
        Command::Train => {
            for s in exp.train()? {
                println!(
                    "gamma1 = {}, gamma2 = {}: {} iterations, objective {:.6e}, model-{}.json",
                    s.penalties.gamma1, s.penalties.gamma2, s.iterations, s.objective, s.config_hash
                );
            }
        }
        Command::Oracle => {
            let solved = exp.oracle()?;
            println!("{} ({solved} newly solved)", exp.oracle_dir().display());
        }
        Command::Validate => {
            for r in exp.validate()? {
                let m = r.metrics;
                println!(
                    "{} gamma1 = {}, gamma2 = {}: Err_calJ {} Err_V {} Err_dV {} d_V {} d_dV {}",
                    r.split,
                    r.gamma1,
                    r.gamma2,
                    format_percent(m.err_cal_j),
                    format_percent(m.err_v),
                    format_percent(m.err_dv),
                    format_percent(m.d_v),
                    format_percent(m.d_dv)
                );
            }
        }
        Command::Report => {
            let out = exp.report()?;
            print!("{}", std::fs::read_to_string(&out.markdown).map_err(|e| hjbfl::Error::Io {
                path: out.markdown.clone(),
                source: e,
            })?);
        }
        Command::Gradcheck { dirs } => {
            let report = exp.gradcheck(dirs)?;
            for r in &report.rows {
                println!(
                    "gamma1 = {}, gamma2 = {}, direction {}: analytic {:.10e} fd {:.10e} rel {:.3e}",
                    r.gamma1, r.gamma2, r.direction, r.analytic, r.finite_difference, r.rel_error
                );
            }
            println!("worst relative error {:.3e} (tolerance {:.1e})", report.worst, report.tolerance);
            if !report.passed() {
                return Ok(Outcome::Failed(format!(
                    "gradient check failed: worst relative error {:.3e} exceeds {:.1e}",
                    report.worst, report.tolerance
                )));
            }
        }
        Command::Run => {
            exp.assemble()?;
            exp.ensemble()?;
            exp.train()?;
            exp.oracle()?;
            exp.validate()?;
            let out = exp.report()?;
            println!("{}", out.markdown.display());
        }
    }
    Ok(Outcome::Ok)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Failed(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(e @ (hjbfl::Error::Config(_) | hjbfl::Error::Contract(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
