use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sts_core::pipeline::{report, stages, ExperimentConfig};
use sts_core::translator::Direction;
use sts_core::StsError;

/// Seed-space unpaired image translation on synthetic bright/dark scenes.
#[derive(Debug, Parser)]
#[command(name = "sts", version)]
struct Cli {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set run.seed=2`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate training sets and the evaluation split.
    GenData,
    /// Train the token-conditioned denoiser.
    TrainDenoiser,
    /// Attach and train the edge-map adapter on a frozen denoiser.
    TrainAdapter,
    /// Invert both training sets into seed collections.
    Invert,
    /// Train the seed translator.
    TrainSts,
    /// Translate an array file of images.
    Translate {
        #[arg(long = "in")]
        input: PathBuf,
        /// Output directory for the result and its intermediates.
        #[arg(long, default_value = "translated")]
        out: PathBuf,
        #[arg(long, default_value = "a2b")]
        direction: String,
    },
    /// Train image and seed probes and write probe.csv.
    Probe,
    /// Evaluate the four ablation configurations.
    Ablate,
    /// Evaluate the full method across guidance scales.
    CfgSweep,
    /// Render plots for metrics tables.
    Report {
        /// Metrics CSV files (ablation.csv, cfg_sweep.csv).
        #[arg(long = "csv", required = true)]
        csvs: Vec<PathBuf>,
        /// Output directory; defaults to `report/` next to each table.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Images per sample grid.
        #[arg(long, default_value_t = 32)]
        samples: usize,
    },
    /// Run every stage from data generation to the guidance sweep.
    All,
}

fn error_line(e: &StsError) -> String {
    serde_json::json!({
        "error": e.kind(),
        "stage": e.stage(),
        "message": e.to_string(),
    })
    .to_string()
}

fn show(paths: &[PathBuf]) -> String {
    paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(" ")
}

fn run(cli: Cli) -> Result<(), StsError> {
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::GenData => {
            stages::gen_data(&cfg)?;
            println!("data written to {}", cfg.workspace().join("data").display());
        }
        Command::TrainDenoiser => {
            stages::train_denoiser_stage(&cfg)?;
            println!("wrote {}", cfg.workspace().join("models").join(stages::Workspace::DENOISER).display());
        }
        Command::TrainAdapter => {
            stages::train_adapter_stage(&cfg)?;
            println!("wrote {}", cfg.workspace().join("models").join(stages::Workspace::ADAPTER).display());
        }
        Command::Invert => {
            stages::invert_stage(&cfg)?;
            println!("seeds written to {}", cfg.workspace().join("seeds").display());
        }
        Command::TrainSts => {
            stages::train_sts_stage(&cfg)?;
            println!("wrote {}", cfg.workspace().join("models").join(stages::Workspace::TRANSLATOR).display());
        }
        Command::Translate { input, out, direction } => {
            let dir: Direction = direction.parse()?;
            let written = stages::translate_stage(&cfg, &input, &out, dir)?;
            println!("wrote {}", show(&written));
        }
        Command::Probe => {
            let r = stages::probe_stage(&cfg)?;
            println!("acc_images={:.4} acc_seeds={:.4}", r.acc_images, r.acc_seeds);
        }
        Command::Ablate => {
            let t = stages::ablate_stage(&cfg)?;
            println!("wrote {}", t.csv.display());
        }
        Command::CfgSweep => {
            let t = stages::cfg_sweep_stage(&cfg)?;
            println!("wrote {}", t.csv.display());
        }
        Command::Report { csvs, out, samples } => {
            for csv in csvs {
                let dir = match &out {
                    Some(o) => o.clone(),
                    None => csv.parent().map(|p| p.join("report")).unwrap_or_else(|| PathBuf::from("report")),
                };
                let written = report::report(&csv, &dir, samples)?;
                println!("wrote {}", show(&written));
            }
        }
        Command::All => {
            stages::gen_data(&cfg)?;
            stages::train_denoiser_stage(&cfg)?;
            stages::train_adapter_stage(&cfg)?;
            stages::invert_stage(&cfg)?;
            stages::train_sts_stage(&cfg)?;
            let p = stages::probe_stage(&cfg)?;
            println!("acc_images={:.4} acc_seeds={:.4}", p.acc_images, p.acc_seeds);
            let a = stages::ablate_stage(&cfg)?;
            let s = stages::cfg_sweep_stage(&cfg)?;
            println!("wrote {} {}", a.csv.display(), s.csv.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", serde_json::json!({ "error": "usage", "stage": null, "message": first }));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
