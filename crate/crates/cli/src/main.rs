use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use gambo::experiment::{
    branin_config, branin_criteria, branin_diagnostics, branin_table, execute, ExperimentConfig,
};
use gambo::selfcheck;

const OUT_ENV: &str = "GAMBO_OUT";
const DEFAULT_OUT_ROOT: &str = "gambo-out";

#[derive(Parser)]
#[command(name = "gambo", version, about = "Offline model-based optimization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every method and seed of an experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to the config's output_dir, then
        /// $GAMBO_OUT/<config name>.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overwrite existing results.
        #[arg(long)]
        force: bool,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Run the full Branin comparison and check it against the reference figures.
    ReproduceBranin {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        force: bool,
    },
    /// Run the fast oracle checks.
    Selfcheck {
        /// Also verify that this network checkpoint loads intact.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

/// Failure kinds mapped to exit codes: usage problems exit 2, everything
/// else 1.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn out_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT))
}

fn cmd_run(config: &Path, out: Option<PathBuf>, force: bool, jobs: usize) -> Result<(), Failure> {
    let cfg = ExperimentConfig::load(config)
        .with_context(|| format!("invalid config {}", config.display()))
        .map_err(Failure::Usage)?;
    let dir = out.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| {
        let stem = config.file_stem().map_or("experiment".into(), |s| s.to_string_lossy().into_owned());
        out_root().join(stem)
    });
    let result = execute(&cfg, &dir, force, jobs).map_err(|e| match e {
        gambo::Error::OutputExists(_) => Failure::Usage(e.into()),
        e => Failure::Runtime(anyhow::Error::from(e).context("experiment failed")),
    })?;
    for r in result.reports() {
        println!(
            "{:<16} top1 {:>9.3} ± {:<8.3} top128 {:>9.3} ± {:<8.3} p90 {:>9.3} ± {:.3}",
            r.method, r.top1.mean, r.top1.std, r.top128.mean, r.top128.std, r.p90.mean, r.p90.std
        );
    }
    println!("results written to {}", dir.display());
    Ok(())
}

fn cmd_reproduce_branin(out: Option<PathBuf>, seeds: u64, jobs: usize, force: bool) -> Result<(), Failure> {
    if seeds == 0 {
        return Err(Failure::Usage(anyhow::anyhow!("--seeds must be positive")));
    }
    let dir = out.unwrap_or_else(|| out_root().join("reproduce-branin"));
    let cfg = branin_config((0..seeds).collect());
    let result = execute(&cfg, &dir, force, jobs).map_err(|e| match e {
        gambo::Error::OutputExists(_) => Failure::Usage(e.into()),
        e => Failure::Runtime(e.into()),
    })?;
    let table = branin_table(&result);
    let criteria = branin_criteria(&result).map_err(anyhow::Error::from)?;
    let diagnostics = branin_diagnostics(&result);
    println!("{table}");
    for c in &criteria {
        println!("{c}");
    }
    println!(
        "{}/{} adaptive runs change their penalty weight; constant(0) GABO {} BO-qEI",
        diagnostics.adapting_runs(),
        diagnostics.distinct_alphas.len(),
        if diagnostics.zero_alpha_matches_bo { "matches" } else { "DIFFERS FROM" }
    );
    std::fs::write(dir.join("table.md"), &table).context("writing table.md")?;
    let report = serde_json::json!({ "criteria": criteria, "diagnostics": diagnostics });
    std::fs::write(dir.join("criteria.json"), serde_json::to_string_pretty(&report).context("encoding criteria")?)
        .context("writing criteria.json")?;
    Ok(())
}

fn cmd_selfcheck(checkpoint: Option<PathBuf>) -> Result<(), Failure> {
    let checks = selfcheck::run_all(checkpoint.as_deref());
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} checks, {failed} failed", checks.len());
    if failed > 0 {
        return Err(Failure::Runtime(anyhow::anyhow!("{failed} self-checks failed")));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run { config, out, force, jobs } => cmd_run(&config, out, force, jobs),
        Command::ReproduceBranin { out, seeds, jobs, force } => cmd_reproduce_branin(out, seeds, jobs, force),
        Command::Selfcheck { checkpoint } => cmd_selfcheck(checkpoint),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
