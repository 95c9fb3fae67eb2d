use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use market_thermo::{run_experiment, Error, ExperimentConfig, ExperimentKind};

#[derive(Parser)]
#[command(name = "market-thermo", version, about = "Seeded market thermostatistics experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Kinetic exchange market
    Kinetic(Common),
    /// Metropolis chain at fixed (T, V, N)
    Canonical(Common),
    /// Metropolis chain at fixed (T, p, N)
    Npt(Common),
    /// Metropolis chain at fixed (T, V, mu)
    Grand(Common),
    /// Two coupled kinetic markets
    Heatflow(Common),
    /// Quasistatic volume round trip
    Sweep(Common),
    /// Closed-form tables over a parameter grid
    Oracle(Common),
    /// Acceptance suite
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        scale: Option<ScaleArg>,
    },
}

#[derive(clap::Args)]
struct Common {
    /// Experiment file; defaults apply to every key it omits
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the config (default: out)
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Quick,
    Full,
}

// exit codes
const CONFIG: u8 = 2;
const FAILED: u8 = 3;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, common, scale) = match cli.command {
        Command::Kinetic(c) => (ExperimentKind::Kinetic, c, None),
        Command::Canonical(c) => (ExperimentKind::Canonical, c, None),
        Command::Npt(c) => (ExperimentKind::Npt, c, None),
        Command::Grand(c) => (ExperimentKind::Grand, c, None),
        Command::Heatflow(c) => (ExperimentKind::HeatFlow, c, None),
        Command::Sweep(c) => (ExperimentKind::Sweep, c, None),
        Command::Oracle(c) => (ExperimentKind::Oracle, c, None),
        Command::Verify { common, scale } => (ExperimentKind::Verify, common, scale),
    };
    let mut cfg = match &common.config {
        Some(path) => match ExperimentConfig::load(path) {
            Ok(c) => c,
            Err(e) => return fail(CONFIG, &e),
        },
        None => ExperimentConfig::new(kind),
    };
    if cfg.kind != kind {
        return fail(CONFIG, &Error::Config(format!("config is for '{}', not '{kind}'", cfg.kind)));
    }
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(scale) = scale {
        cfg = cfg.set("scale", match scale {
            ScaleArg::Quick => "quick",
            ScaleArg::Full => "full",
        });
    }
    let out_dir = common.out_dir.or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
    match run_experiment(&cfg, &out_dir) {
        Ok(outcome) => {
            for f in &outcome.files {
                println!("{}", f.display());
            }
            if outcome.passed {
                ExitCode::SUCCESS
            } else {
                eprintln!("verification failed; see {}", out_dir.join("verify.csv").display());
                ExitCode::from(FAILED)
            }
        }
        Err(Error::Io(e)) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
        Err(e) => fail(CONFIG, &e),
    }
}

fn fail(code: u8, e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(code)
}
