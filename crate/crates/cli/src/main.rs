use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dmdenkf_cli::commands;
use dmdenkf_cli::config::{parse_rank_list, parse_sigma_list, RunConfig, OUT_ENV};
use dmdenkf_cli::experiments::parse_methods;
use dmdenkf_cli::CliError;

#[derive(Parser)]
#[command(name = "dmdenkf", version, about = "DMDEnKF experiment runner")]
struct Cli {
    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Base seed; run i uses a seed derived from (seed, i)
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Number of Monte Carlo runs per noise level
    #[arg(long, global = true)]
    runs: Option<usize>,

    /// Comma-separated measurement noise levels
    #[arg(long, global = true)]
    sigma: Option<String>,

    /// Comma-separated subset of windowed,online,streaming,dmdenkf,hankel
    #[arg(long, global = true)]
    methods: Option<String>,

    /// Output directory
    #[arg(long, global = true, env = OUT_ENV)]
    out: Option<PathBuf>,

    /// JSON config file; flags take precedence over its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads (0 = one per core)
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Eigenvalue tracking on the drifting rotation system
    SynthEig {
        /// Also write every per-step estimate
        #[arg(long)]
        tracks: bool,
    },
    /// DMDEnKF argument error against ensemble size, with a particle filter reference
    EnkfVsPf {
        /// Comma-separated ensemble sizes
        #[arg(long)]
        ensemble_sizes: Option<String>,

        /// Particle filter size (0 skips it)
        #[arg(long)]
        particles: Option<usize>,
    },
    /// 50-step forecasts of the synthetic growth/decay system
    SynthPandemic,
    /// ILI forecasting on a data file, or on the synthetic fixture
    Ili {
        /// ILI CSV (year,week,region,age_group,ili,total_patients)
        #[arg(long)]
        data: Option<PathBuf>,

        /// Census shares CSV (date,age_group,share)
        #[arg(long)]
        census: Option<PathBuf>,

        /// Truncation ranks, e.g. 4..12 or 4,8,12
        #[arg(long)]
        rank_sweep: Option<String>,

        /// Delay-embedding depth (1 = plain DMDEnKF)
        #[arg(long)]
        delay: Option<usize>,

        #[arg(long)]
        rank: Option<usize>,
    },
    /// Write one rotation and one pandemic series per noise level
    ExportSynthetic,
    /// Write the synthetic ILI fixture and its census table
    ExportIliFixture,
}

fn build_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let c = &cli.common;
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path)?,
        None => {
            let mut d = RunConfig::default();
            if matches!(cli.command, Command::EnkfVsPf { .. }) {
                d.sigma = vec![0.5];
            }
            d
        }
    };
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    if let Some(v) = c.runs {
        cfg.runs = v;
    }
    if let Some(v) = &c.sigma {
        cfg.sigma = parse_sigma_list(v)?;
    }
    if let Some(v) = &c.methods {
        cfg.methods = parse_methods(v)?;
    }
    if let Some(v) = &c.out {
        cfg.out = v.clone();
    }
    if let Some(v) = c.workers {
        cfg.workers = v;
    }
    match &cli.command {
        Command::EnkfVsPf { ensemble_sizes, particles } => {
            if let Some(v) = ensemble_sizes {
                cfg.pf.ensemble_sizes = v
                    .split(',')
                    .map(|s| s.trim().parse().map_err(|_| CliError::Config(format!("bad ensemble size '{s}'"))))
                    .collect::<Result<_, _>>()?;
            }
            if let Some(v) = particles {
                cfg.pf.particles = *v;
            }
        }
        Command::Ili {
            data,
            census,
            rank_sweep,
            delay,
            rank,
        } => {
            if data.is_some() {
                cfg.ili.data = data.clone();
            }
            if census.is_some() {
                cfg.ili.census = census.clone();
            }
            if let Some(v) = rank_sweep {
                cfg.ili.rank_sweep = parse_rank_list(v)?;
            }
            if let Some(v) = delay {
                cfg.ili.experiment.delay = *v;
            }
            if let Some(v) = rank {
                cfg.ili.experiment.rank = *v;
            }
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<Vec<PathBuf>, CliError> {
    let cfg = build_config(&cli)?;
    match cli.command {
        Command::SynthEig { tracks } => commands::cmd_synth_eig(&cfg, tracks),
        Command::EnkfVsPf { .. } => commands::cmd_enkf_vs_pf(&cfg),
        Command::SynthPandemic => commands::cmd_synth_pandemic(&cfg),
        Command::Ili { .. } => commands::cmd_ili(&cfg),
        Command::ExportSynthetic => commands::cmd_export_synthetic(&cfg),
        Command::ExportIliFixture => commands::cmd_export_ili_fixture(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
