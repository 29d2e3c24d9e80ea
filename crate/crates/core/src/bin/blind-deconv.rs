use std::path::PathBuf;
use std::process::ExitCode;

use blind_deconv::blind::InitKind;
use blind_deconv::io::commands::{cmd_blind, cmd_metrics, cmd_selfcheck, cmd_simulate};
use blind_deconv::io::RunConfig;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(version, about = "Multi-image blind deconvolution of stellar fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (flat `section.key = value` file).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `output.dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    common: Common,
    /// Input data directory (overrides `input.dir`).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_parser = ["autocorrelation", "pedestal"])]
    init: Option<String>,
    #[arg(long)]
    freeze_psf: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic observations and their ground truth.
    Simulate(Common),
    /// Alternate object and PSF updates.
    Blind(SolveArgs),
    /// Deconvolve with the PSFs held fixed.
    Deconv(SolveArgs),
    /// Score a reconstruction directory against a truth directory.
    Metrics {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the projection and gradient oracle suites.
    Selfcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load(common: &Common) -> blind_deconv::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.set("sim.seed", s.to_string())?;
    }
    if let Some(o) = &common.out {
        cfg.set("output.dir", o.to_string_lossy())?;
    }
    Ok(cfg)
}

fn solve(args: &SolveArgs, freeze: bool) -> blind_deconv::Result<()> {
    let mut cfg = load(&args.common)?;
    if let Some(d) = &args.data {
        cfg.set("input.dir", d.to_string_lossy())?;
    }
    if let Some(i) = &args.init {
        cfg.set("blind.init", i.parse::<InitKind>()?.to_string())?;
    }
    if freeze || args.freeze_psf {
        cfg.set("blind.freeze_psf", "true")?;
    }
    let r = cmd_blind(&cfg, &cfg.input_dir(), &cfg.output_dir())?;
    println!(
        "{} outer iterations, normalized objective {}",
        r.objective_trace.len(),
        r.final_objective().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn run(cli: Cli) -> blind_deconv::Result<bool> {
    match cli.command {
        Command::Simulate(common) => {
            let cfg = load(&common)?;
            let sim = cmd_simulate(&cfg, &cfg.output_dir())?;
            println!(
                "wrote {} image set(s) to {}, exposure {:.3} s per frame",
                sim.observations.p(),
                cfg.output_dir().display(),
                sim.exposure_time
            );
        }
        Command::Blind(args) => solve(&args, false)?,
        Command::Deconv(args) => solve(&args, true)?,
        Command::Metrics { common, data } => {
            let mut cfg = load(&common)?;
            if let Some(d) = data {
                cfg.set("input.dir", d.to_string_lossy())?;
            }
            let row = cmd_metrics(&cfg.output_dir(), &cfg.input_dir())?;
            print!("{}", row.table().to_csv());
        }
        Command::Selfcheck { seed } => {
            let mut ok = true;
            for r in cmd_selfcheck(seed)? {
                println!(
                    "{:<10} {} ({} cases, {} failures, worst {:.3e})",
                    r.name,
                    if r.passed() { "PASS" } else { "FAIL" },
                    r.cases,
                    r.failures,
                    r.worst
                );
                ok &= r.passed();
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
