// grda-lab: run gRDA / RDA / SGD Monte-Carlo experiments from a JSON config
// and write trajectories.csv, band.csv, metrics.csv and report.json.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use grda_core::experiment::{
    emit_report, run_band_only, run_lr_experiment, run_pca_experiment, run_rda_bias_check, ExperimentConfig, Report,
};
use grda_core::Error;

#[derive(Parser)]
#[command(name = "grda-lab", version, about = "gRDA experiments and asymptotic confidence bands")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Linear-regression experiment with bands and metrics.
    LrRun(Common),
    /// Online sparse PCA experiment.
    PcaRun(Common),
    /// Long-run RDA bias on a diagonal design.
    RdaBias(Common),
    /// Bands only, no empirical repetitions.
    Band(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
}

fn load(args: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::from_path(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(r) = args.reps {
        cfg.reps = r;
    }
    if let Some(o) = &args.out {
        cfg.out = Some(o.clone());
    }
    if let Some(w) = args.workers {
        cfg.workers = Some(w);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    let (args, runner): (&Common, fn(&ExperimentConfig) -> Result<Report, Error>) = match &cli.command {
        Command::LrRun(a) => (a, run_lr_experiment),
        Command::PcaRun(a) => (a, run_pca_experiment),
        Command::RdaBias(a) => (a, run_rda_bias_check),
        Command::Band(a) => (a, run_band_only),
    };
    let cfg = load(args)?;
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("grda-out"));
    let report = runner(&cfg)?;
    emit_report(&report, &out)?;

    let s = &report.summary;
    let show = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    eprintln!("wrote {}", out.display());
    eprintln!(
        "reps {}/{} kept, terminal coverage {}, terminal bias {}, true zeros {}, false zeros {}",
        report.divergence.reps_total - report.divergence.reps_diverged,
        report.divergence.reps_total,
        show(s.terminal_coverage),
        show(s.terminal_bias),
        show(s.terminal_true_zero_prop),
        show(s.terminal_false_zero_prop),
    );
    if let Some(entries) = &report.rda_bias {
        for e in entries {
            eprintln!(
                "coord {:>3}: w* {:+.4}  measured bias {:.5}  predicted {:.5}",
                e.coord, e.w_star, e.measured, e.predicted
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
