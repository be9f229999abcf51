use clap::{Parser, Subcommand, ValueEnum};
use qdtscat_cli::cache::K0Cache;
use qdtscat_cli::config::{Pipeline, ScanConfig};
use qdtscat_cli::run::{self, Outcome, RunError};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "qdtscat", version, about = "Ultracold atom scattering in a dc field: direct Numerov and MQDT scans")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
    /// configuration file (`section.key = value` lines)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pipeline: Option<PipelineArg>,
    /// output directory (overrides output.directory)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// K0 cache directory
    #[arg(long, global = true)]
    cache: Option<PathBuf>,
    /// relative perturbation of the Numerov start values
    #[arg(long, global = true)]
    seed_noise: Option<f64>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Verb {
    /// cross sections over the field x energy grid
    Scan,
    /// fit c12 to system.target_a_sc
    Tune,
    /// invariant table of the analytic base pairs
    Selftest,
    /// zero-energy bound-state roots against sigma peaks over the field grid
    Resonances,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum PipelineArg {
    Numerov,
    Mqdt,
    Both,
}

fn load(cli: &Cli) -> Result<ScanConfig, RunError> {
    let mut cfg = match &cli.config {
        Some(p) => ScanConfig::from_path(p).map_err(|e| RunError::Config(format!("{}: {e}", p.display())))?,
        None => ScanConfig::default(),
    };
    run::apply_pipeline(
        &mut cfg,
        cli.pipeline.map(|p| match p {
            PipelineArg::Numerov => Pipeline::Numerov,
            PipelineArg::Mqdt => Pipeline::Mqdt,
            PipelineArg::Both => Pipeline::Both,
        }),
    );
    if let Some(o) = &cli.out {
        cfg.output.directory = o.clone();
    }
    if let Some(s) = cli.seed_noise {
        if !(s >= 0.0 && s < 0.5) {
            return Err(RunError::Config(format!("--seed-noise must lie in [0, 0.5), got {s}")));
        }
        cfg.numerics.seed_noise = s;
    }
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<Outcome, RunError> {
    let cfg = load(cli)?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(RunError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| RunError::Config(format!("thread pool: {e}")))?;
    }
    let cache = match &cli.cache {
        Some(d) => Some(K0Cache::open(d).map_err(|e| RunError::Config(format!("cache {}: {e}", d.display())))?),
        None => None,
    };
    match cli.verb {
        Verb::Scan => run::run_scan(&cfg, cache.as_ref()),
        Verb::Resonances => run::run_resonances(&cfg),
        Verb::Selftest => run::run_selftest(&cfg),
        Verb::Tune => {
            let (c12, out) = run::run_tune(&cfg)?;
            println!("system.c12 = {c12:e}");
            Ok(out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(out) => {
            for f in &out.files {
                println!("{}", f.display());
            }
            if out.failed > 0 {
                eprintln!("{} of {} points failed", out.failed, out.total);
            }
            ExitCode::from(out.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("qdtscat: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
