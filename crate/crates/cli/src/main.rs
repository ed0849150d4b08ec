use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use coulomb_cli::compare::compare;
use coulomb_cli::config::{ExperimentConfig, Kind};
use coulomb_cli::run_to_dir;

#[derive(Parser)]
#[command(name = "coulomb", version, about = "Two-dimensional Coulomb gas experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// JSON experiment config; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config's `output`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; results depend only on this count, not on scheduling.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Master seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Splitting, truncation, sandwich and equilibrium checks.
    IdentitySuite(RunArgs),
    /// Sampled linear statistics against the Gaussian limit.
    CltVerify(RunArgs),
    /// Mesoscopic linear statistics.
    MesoVerify(RunArgs),
    /// Energy minimizers and their fluctuations.
    Minimize(RunArgs),
    /// Transport maps, push-forwards and the anisotropy functional.
    TransportCheck(RunArgs),
    /// Log-Laplace transform and tail bounds.
    Moddev(RunArgs),
    /// Runs whatever experiment the config names.
    Run(RunArgs),
    /// Tabulates metric differences between two run directories.
    Compare { a: PathBuf, b: PathBuf },
}

fn load(args: &RunArgs, kind: Option<Kind>) -> Result<ExperimentConfig> {
    let mut cfg = match (&args.config, kind) {
        (Some(p), _) => ExperimentConfig::load(p)?,
        (None, Some(k)) => {
            let seed = args.seed.context("no config given: --seed is required (there is no default seed)")?;
            ExperimentConfig::new(k, seed)
        }
        (None, None) => anyhow::bail!("`run` needs --config"),
    };
    if let Some(k) = kind {
        if cfg.kind != k {
            anyhow::bail!("config names experiment `{}` but the subcommand is `{k}`", cfg.kind);
        }
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = &args.out {
        cfg.output = Some(o.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(args: &RunArgs, kind: Option<Kind>) -> Result<bool> {
    let cfg = load(args, kind)?;
    let threads = args.threads.max(1);
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().context("starting the worker pool")?;
    let out = cfg.output.clone().unwrap_or_else(|| PathBuf::from(format!("runs/{}-{}", cfg.kind, cfg.seed)));
    let (report, _) = run_to_dir(&cfg, &out, threads).with_context(|| format!("experiment {}", cfg.kind))?;
    for c in &report.checks {
        let status = if c.pass { "PASS" } else { "FAIL" };
        println!("{status} {:<40} {:>12.4e} {} {:.4e}  {}", c.id, c.value, c.relation, c.threshold, c.detail);
    }
    println!("outputs in {}", out.display());
    Ok(report.all_pass())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::IdentitySuite(a) => execute(a, Some(Kind::IdentitySuite)),
        Command::CltVerify(a) => execute(a, Some(Kind::CltVerify)),
        Command::MesoVerify(a) => execute(a, Some(Kind::MesoVerify)),
        Command::Minimize(a) => execute(a, Some(Kind::Minimize)),
        Command::TransportCheck(a) => execute(a, Some(Kind::TransportCheck)),
        Command::Moddev(a) => execute(a, Some(Kind::Moddev)),
        Command::Run(a) => execute(a, None),
        Command::Compare { a, b } => compare(a, b).map(|r| {
            print!("{}", r.render());
            r.flagged == 0
        }),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
