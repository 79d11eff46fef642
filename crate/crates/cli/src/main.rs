use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use finder_cli::commands::{self, ExtractOptions, ExtractSummary, Mode, REPORT_FILE};
use finder_cli::config::{load_config, LoadedConfig, OracleChoice};
use finder_cli::CliError;
use finder_core::evaluation::render_table;

#[derive(Parser)]
#[command(name = "finder", version, about = "Zero-shot attribute and entity extraction over a document corpus")]
struct Cli {
    /// JSON configuration file; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Overrides the configured workspace directory.
    #[arg(long, global = true)]
    workspace: Option<PathBuf>,
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum OracleArg {
    LlmJudge,
    Interactive,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Remote,
    Replay,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Relevance oracle for the filter stage.
    #[arg(long, value_enum)]
    oracle: Option<OracleArg>,
    /// Retrieval query used to rank chunks.
    #[arg(long)]
    retrieval_query: Option<String>,
    /// Probe budget for the relevance filter.
    #[arg(long)]
    max_probes: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Read text, markdown and HTML files into the workspace.
    Ingest {
        /// Files or directories; the configured corpus paths when omitted.
        paths: Vec<PathBuf>,
    },
    /// Embed all chunks of the ingested corpus.
    Index,
    /// Run the full pipeline and write per-document JSON.
    Extract {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        backend: Option<BackendArg>,
    },
    /// Run against the remote model and save every completion to a replay cache.
    Record {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Run offline from a replay cache.
    Replay {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Score predictions against gold annotations.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        /// Where to write the JSON report; defaults to the output directory.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn apply_run_args(loaded: &mut LoadedConfig, run: &RunArgs) -> Result<(), CliError> {
    let cfg = &mut loaded.config;
    if let Some(oracle) = run.oracle {
        cfg.oracle = match oracle {
            OracleArg::LlmJudge => OracleChoice::LlmJudge,
            OracleArg::Interactive => OracleChoice::InteractivePrompt,
        };
    }
    if let Some(q) = &run.retrieval_query {
        cfg.pipeline.retrieval_query = q.clone();
    }
    if let Some(p) = run.max_probes {
        cfg.pipeline.max_probes = p;
    }
    cfg.validate()?;
    loaded.digest = cfg.digest();
    Ok(())
}

fn print_extract(summary: &ExtractSummary) {
    println!(
        "{} documents, {} entities, {} attribute values, {} model calls, {} recoverable failures",
        summary.documents, summary.entities, summary.attributes, summary.llm_calls, summary.failures
    );
    for path in &summary.written {
        println!("wrote {}", path.display());
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut loaded = load_config(cli.config.as_deref())?;
    if let Some(dir) = cli.output_dir {
        loaded.config.output_dir = dir;
    }
    if let Some(dir) = cli.workspace {
        loaded.config.workspace_dir = dir;
    }
    match cli.command {
        Command::Ingest { paths } => {
            let s = commands::ingest(&loaded, &paths)?;
            println!(
                "{} documents ({} added, {} updated, {} unchanged, {} removed, {} failed)",
                s.documents,
                s.added,
                s.updated,
                s.unchanged,
                s.removed,
                s.failed.len()
            );
            for (path, reason) in &s.failed {
                println!("failed {path}: {reason}");
            }
        }
        Command::Index => {
            let stats = commands::index(&loaded)?;
            println!("indexed {} chunks ({} dimensions)", stats.count, stats.dim);
        }
        Command::Extract { run, backend } => {
            apply_run_args(&mut loaded, &run)?;
            let mode = match backend {
                None => Mode::Configured,
                Some(BackendArg::Remote) => {
                    loaded.config.gateway.backend = finder_cli::config::BackendChoice::Remote;
                    Mode::Configured
                }
                Some(BackendArg::Replay) => Mode::Replay,
            };
            print_extract(&commands::extract(&loaded, ExtractOptions { mode, ..Default::default() })?);
        }
        Command::Record { run, cache } => {
            apply_run_args(&mut loaded, &run)?;
            let options = ExtractOptions {
                mode: Mode::Record,
                cache_path: cache,
                ..Default::default()
            };
            print_extract(&commands::extract(&loaded, options)?);
        }
        Command::Replay { run, cache } => {
            apply_run_args(&mut loaded, &run)?;
            let options = ExtractOptions {
                mode: Mode::Replay,
                cache_path: cache,
                ..Default::default()
            };
            print_extract(&commands::extract(&loaded, options)?);
        }
        Command::Eval {
            predictions,
            gold,
            report,
        } => {
            let report_path = report.unwrap_or_else(|| loaded.config.output_dir.join(REPORT_FILE));
            let report = commands::eval(&predictions, &gold, &report_path)?;
            print!("{}", render_table(&report));
            println!("wrote {}", report_path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
