use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pairgan_cli::{commands, CliError, RunConfig};

#[derive(Parser)]
#[command(name = "pairgan", version, about = "Personalised change maps from a single pair of brain scans")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML or JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `output` from the configuration.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Start from the 64x64x32, 200-epoch preset instead of the full-size defaults.
    #[arg(long, global = true)]
    desk_scale: bool,
    /// No per-epoch progress on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Resample, histogram-match, normalise and centre the pair.
    Preprocess,
    /// Train the generator/critic pair and save the checkpoint ensemble.
    Train,
    /// Compute the ensemble change map and render overlays.
    Predict,
    /// Ternary maps, volume change, RANO class and ROC metrics.
    Evaluate,
    /// Write synthetic phantom cases with known change.
    Phantom,
    /// Preprocess, train, predict and evaluate in one go.
    RunAll,
}

fn load(cli: &Cli) -> Result<RunConfig, CliError> {
    let base = if cli.desk_scale { RunConfig::desk() } else { RunConfig::default() };
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path, base)?,
        None => base,
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.output {
        cfg.output = out.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = load(cli)?;
    match cli.command {
        Command::Preprocess => {
            let p = commands::preprocess(&cfg)?;
            println!("preprocessed: shifts t1 {:?}, t2 {:?}; manifest {}", p.shifts[0], p.shifts[1], p.manifest.display());
        }
        Command::Train => {
            let t = commands::train(&cfg, cli.quiet)?;
            println!("trained: {} checkpoints; manifest {}", t.checkpoints.len(), t.manifest.display());
        }
        Command::Predict => {
            let p = commands::predict(&cfg)?;
            println!("change map {}; {} overlays", p.map_path.display(), p.overlays.len());
        }
        Command::Evaluate => {
            let e = commands::evaluate(&cfg)?;
            if let Some(r) = e.report {
                print_report(&r);
            }
            for r in &e.cohort {
                print!("{}: ", r.case);
                print_report(&r.report);
            }
        }
        Command::Phantom => {
            let dirs = commands::phantom(&cfg)?;
            println!("wrote {} phantom cases under {}", dirs.len(), commands::layout(&cfg).phantoms().display());
        }
        Command::RunAll => match commands::run_all(&cfg, cli.quiet)? {
            Some(r) => print_report(&r),
            None => println!("done; no segmentations given, evaluation skipped"),
        },
    }
    Ok(())
}

fn print_report(r: &pairgan_core::CaseReport) {
    let auc = |v: Option<f64>| v.map(|a| format!("{a:.3}")).unwrap_or_else(|| "-".into());
    let cat = |a: Option<pairgan_core::RanoAssessment>| a.map(|a| a.category.as_str()).unwrap_or("-");
    println!(
        "volume change {:+}, predicted {}, truth {}, AUC growth {} reduction {} micro {}",
        r.volume_change,
        cat(r.predicted),
        cat(r.truth),
        auc(r.roc.growth.as_ref().map(|c| c.auc)),
        auc(r.roc.reduction.as_ref().map(|c| c.auc)),
        auc(r.roc.micro_auc)
    );
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
