use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::OnceLock;

use anyhow::Result;
use clap::{Parser, Subcommand};

use sdm_cli::config::PipelineConfig;
use sdm_cli::pipeline;
use sdm_core::metrics::Task;
use sdm_core::raster::Modality;

fn defaults_help() -> &'static str {
    static HELP: OnceLock<String> = OnceLock::new();
    HELP.get_or_init(|| {
        let toml = PipelineConfig::with_seed(0)
            .to_toml()
            .unwrap_or_else(|e| format!("# unavailable: {e}\n"));
        format!(
            "Configuration is TOML with one section per stage; `seed` is required.\n\
             Relative paths resolve against the working directory.\n\
             Effective defaults:\n\n{toml}"
        )
    })
}

#[derive(Parser)]
#[command(name = "sdm", version, about = "Species distribution modeling pipeline", after_long_help = defaults_help())]
struct Cli {
    /// Pipeline config file (TOML).
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic world (occurrences, covariates, patches) to paths.data_dir.
    Synth,
    /// Tile the study area and aggregate occurrence counts per cell.
    Grid,
    /// Generate pseudo-absence cells.
    Pseudoabs,
    /// Split presences and write the rebalanced training set and class weights.
    Balance,
    /// Train a fusion model for one task and image modality.
    Train {
        #[arg(long, default_value = "regression")]
        task: Task,
        #[arg(long, default_value = "lc")]
        modality: Modality,
    },
    /// Fit ensemble weights for the rgb, lc and ndvi regression models.
    Ensemble,
    /// Random-forest feature ranking with recursive elimination.
    Rfe,
    /// Score saved models on a test CSV and chart the comparison.
    Eval {
        /// Model checkpoint; repeat to compare several.
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
        /// Test CSV with `row,col,country,target` columns.
        #[arg(long)]
        data: PathBuf,
        /// Ensemble weights CSV; adds an `ensemble` row.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Print one band of a patch file as a text matrix.
    Dump {
        patch: PathBuf,
        #[arg(long)]
        band: Option<String>,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    match &cli.config {
        Some(path) => PipelineConfig::load(path, &cli.overrides),
        None => PipelineConfig::from_toml_str("", &cli.overrides),
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Dump { patch, band } = &cli.command {
        print!("{}", pipeline::dump_band(patch, band.as_deref())?);
        return Ok(());
    }
    let cfg = load_config(&cli)?;
    let manifest = match &cli.command {
        Command::Synth => pipeline::synth(&cfg)?,
        Command::Grid => pipeline::grid(&cfg)?,
        Command::Pseudoabs => pipeline::pseudoabs(&cfg)?,
        Command::Balance => pipeline::balance(&cfg)?,
        Command::Train { task, modality } => pipeline::train_model(&cfg, *task, *modality)?,
        Command::Ensemble => pipeline::ensemble(&cfg)?,
        Command::Rfe => pipeline::rfe_stage(&cfg)?,
        Command::Eval { models, data, weights } => {
            let report = pipeline::eval(&cfg, models, data, weights.as_deref())?;
            println!("model\tn\tmae\taccuracy\tauc");
            let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into());
            for (name, r) in &report.rows {
                println!("{name}\t{}\t{}\t{}\t{}", r.n, f(r.mae), f(r.accuracy), f(r.auc));
            }
            report.manifest
        }
        Command::Dump { .. } => unreachable!("handled above"),
    };
    for a in &manifest.artifacts {
        log::debug!("{} {} ({} bytes)", a.sha256, a.path, a.bytes);
    }
    log::info!("{}: wrote {} artifacts", manifest.stage, manifest.artifacts.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
