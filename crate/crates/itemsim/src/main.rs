//! Command-line entry point for the similarity surveillance pipeline.
//!
//! Exit codes: 0 success, 1 the pipeline produced warnings (rejected blocks,
//! request errors, truncations), 2 hard failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use itemsim::config::RunConfig;
use itemsim::pipeline::{
    cmd_analyze, cmd_embed, cmd_generate, cmd_ingest, cmd_report, cmd_run, Workspace,
};

#[derive(Parser)]
#[command(
    name = "itemsim",
    about = "Item-bank similarity surveillance: generate, ingest, embed, analyze, report",
    version
)]
struct Cli {
    /// Run configuration (JSON). Defaults to ./itemsim.json when present,
    /// otherwise the built-in offline configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Workspace directory for generated files, bank, caches, and reports.
    #[arg(long, global = true)]
    workspace: Option<PathBuf>,

    /// Restrict embed/analyze/report to one backend id (repeatable).
    #[arg(long = "backend", global = true)]
    backends: Vec<String>,

    /// Determinism seed for mock providers and test backends; pins
    /// timestamps so repeated runs are byte-identical.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate raw items for every configured provider/strategy/topic.
    Generate,
    /// Parse generated documents into the validated item bank.
    Ingest,
    /// Embed canonical item texts under each backend (cache-aware).
    Embed,
    /// Build similarity reports and flag files for each backend.
    Analyze,
    /// Re-render reports from the stored JSON and print them.
    Report,
    /// The full pipeline: generate, ingest, embed, analyze.
    Run,
}

fn load_config(cli: &Cli) -> Result<RunConfig, String> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(|e| e.to_string())?,
        None => {
            let default_path = PathBuf::from("itemsim.json");
            if default_path.exists() {
                RunConfig::load(&default_path).map_err(|e| e.to_string())?
            } else {
                RunConfig::default()
            }
        }
    };
    if let Some(workspace) = &cli.workspace {
        config.workspace = Some(workspace.clone());
    }
    if let Some(seed) = cli.seed {
        config.seed = Some(seed);
    }
    config.validate().map_err(|e| e.to_string())?;
    Ok(config)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let config = match load_config(&cli) {
        Ok(config) => config,
        Err(message) => {
            eprintln!("error: {message}");
            return ExitCode::from(2);
        }
    };
    let ws = Workspace::new(
        config
            .workspace
            .clone()
            .unwrap_or_else(|| PathBuf::from("workspace")),
    );

    let outcome: Result<usize, String> = match cli.command {
        Command::Generate => cmd_generate(&config, &ws)
            .map(|summary| {
                println!(
                    "generate run={} files={} requests={} request_errors={}",
                    config.run_id,
                    summary.files.len(),
                    summary.requests,
                    summary.request_errors
                );
                summary.warnings()
            })
            .map_err(|e| e.to_string()),
        Command::Ingest => cmd_ingest(&config, &ws)
            .map(|summary| {
                println!(
                    "ingest items={} warnings={} rejected={} file_errors={} bank={}",
                    summary.items,
                    summary.parse_warnings,
                    summary.rejected_blocks,
                    summary.file_errors.len(),
                    summary.bank_path.display()
                );
                summary.warnings()
            })
            .map_err(|e| e.to_string()),
        Command::Embed => cmd_embed(&config, &ws, &cli.backends)
            .map(|summary| {
                for backend in &summary.backends {
                    println!(
                        "embed backend={} texts={} cache_hits={} backend_calls={} truncated={}",
                        backend.backend_id,
                        backend.stats.texts,
                        backend.stats.cache_hits,
                        backend.stats.backend_calls,
                        backend.stats.truncated
                    );
                }
                summary.warnings()
            })
            .map_err(|e| e.to_string()),
        Command::Analyze => cmd_analyze(&config, &ws, &cli.backends)
            .map(|summary| {
                for (backend_id, path) in &summary.reports {
                    println!("analyze backend={backend_id} report={}", path.display());
                }
                summary.warnings()
            })
            .map_err(|e| e.to_string()),
        Command::Report => cmd_report(&config, &ws, &cli.backends)
            .map(|rendered| {
                for (_, markdown) in &rendered {
                    println!("{markdown}");
                }
                0
            })
            .map_err(|e| e.to_string()),
        Command::Run => cmd_run(&config, &ws, &cli.backends)
            .map(|summary| {
                println!(
                    "run run_id={} items={} requests={} warnings={}",
                    config.run_id,
                    summary.ingest.items,
                    summary.generate.requests,
                    summary.warnings()
                );
                for backend in &summary.embed.backends {
                    println!(
                        "embed backend={} texts={} cache_hits={} backend_calls={} truncated={}",
                        backend.backend_id,
                        backend.stats.texts,
                        backend.stats.cache_hits,
                        backend.stats.backend_calls,
                        backend.stats.truncated
                    );
                }
                for (backend_id, path) in &summary.analyze.reports {
                    println!("analyze backend={backend_id} report={}", path.display());
                }
                summary.warnings()
            })
            .map_err(|e| e.to_string()),
    };

    match outcome {
        Ok(0) => ExitCode::SUCCESS,
        Ok(warnings) => {
            eprintln!("completed with {warnings} warning(s)");
            ExitCode::from(1)
        }
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
    }
}
