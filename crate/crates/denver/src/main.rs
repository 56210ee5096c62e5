use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use denver::config::RunConfig;
use denver::pipeline;

#[derive(Parser)]
#[command(name = "denver", about = "Vessel segmentation by video layer decomposition")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted-path config overrides, e.g. --set stage2.total_steps=1500
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic angiography clip with ground truth.
    Synth,
    /// Compute vessel prior masks and guidance flow.
    Preprocess,
    /// Fit the deforming background model.
    Stage1,
    /// Train the segmentation networks and write final masks.
    Stage2,
    /// Score final and prior masks against ground truth.
    Eval,
    /// Run every stage in order.
    RunAll,
    /// Print the effective configuration and exit.
    ShowConfig,
}

fn load_config(cli: &Cli) -> denver::error::Result<RunConfig> {
    match &cli.config {
        Some(path) => RunConfig::load(path, &cli.overrides),
        None => RunConfig::from_toml("", &cli.overrides),
    }
}

fn run(cli: &Cli) -> denver::error::Result<()> {
    let cfg = load_config(cli)?;
    match cli.cmd {
        Cmd::Synth => pipeline::cmd_synth(&cfg),
        Cmd::Preprocess => pipeline::cmd_preprocess(&cfg),
        Cmd::Stage1 => pipeline::cmd_stage1(&cfg),
        Cmd::Stage2 => pipeline::cmd_stage2(&cfg),
        Cmd::Eval => {
            let (final_report, prior_report) = pipeline::cmd_eval(&cfg)?;
            println!("final masks vs GT\n{}", final_report.to_table());
            println!("prior masks vs GT\n{}", prior_report.to_table());
            Ok(())
        }
        Cmd::RunAll => {
            if let Some((final_report, prior_report)) = pipeline::cmd_run_all(&cfg)? {
                println!("final masks vs GT\n{}", final_report.to_table());
                println!("prior masks vs GT\n{}", prior_report.to_table());
            }
            Ok(())
        }
        Cmd::ShowConfig => {
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("denver: {}", e);
            ExitCode::FAILURE
        }
    }
}
