mod config;
mod demo;
mod error;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use chemtyper::typer::Ablation;
use clap::{Args, Parser, Subcommand};

use crate::config::{Overrides, ResolverMode, RunConfig};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "chemtyper", version, about = "Fine-grained chemical entity typing pipeline")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    ablation: Option<Ablation>,
    #[arg(long, global = true)]
    threshold: Option<f64>,
    #[arg(long, global = true, value_enum)]
    resolver: Option<ResolverMode>,
    /// Output root; each stage writes a subdirectory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Repeat for more log output on stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the type tree, label space and entity dictionary.
    BuildOntology,
    /// Tag every corpus split with the entity dictionary.
    DistantLabel,
    /// Train the typing model on the labeled train split.
    Train,
    /// Score the trained model on the labeled dev/test splits, or compare
    /// two labeled files.
    Evaluate {
        #[arg(long, requires = "gold")]
        predictions: Option<PathBuf>,
        #[arg(long, requires = "predictions")]
        gold: Option<PathBuf>,
    },
    /// Type mentions in a JSONL file of `*`-marked or labeled sentences.
    Predict {
        #[arg(long)]
        input: PathBuf,
    },
    /// Resolver fixture management.
    Resolver {
        #[command(subcommand)]
        action: ResolverAction,
    },
    /// Write a synthetic demo project (fixtures plus config) into --out.
    Demo {
        #[arg(long, default_value_t = 200)]
        size: usize,
        #[arg(long, default_value_t = 40)]
        epochs: usize,
    },
}

#[derive(Debug, Subcommand)]
enum ResolverAction {
    /// Validate the fixture file and write an ingest report.
    Ingest,
    /// Resolve mentions and print one JSON line each.
    Resolve { mentions: Vec<String> },
    /// Linked/unlinkable counts over the labeled splits.
    Report,
}

fn load_config(g: &GlobalArgs) -> Result<RunConfig, CliError> {
    let path = g
        .config
        .as_ref()
        .ok_or_else(|| CliError::Input("this subcommand needs --config".into()))?;
    let overrides = Overrides {
        seed: g.seed,
        ablation: g.ablation,
        threshold: g.threshold,
        resolver: g.resolver,
        out: g.out.clone(),
    };
    RunConfig::load(path, &overrides)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Evaluate {
            predictions: Some(p),
            gold: Some(g),
        } => stages::compare(&p, &g),
        Command::Demo { size, epochs } => {
            let out = cli
                .global
                .out
                .ok_or_else(|| CliError::Input("demo needs --out".into()))?;
            let opts = demo::DemoOptions {
                size,
                seed: cli.global.seed.unwrap_or(11),
                epochs,
            };
            demo::write_demo(&out, &opts)?;
            println!("demo project written to {}", out.display());
            Ok(())
        }
        cmd => {
            let cfg = load_config(&cli.global)?;
            match cmd {
                Command::BuildOntology => stages::build_ontology(&cfg),
                Command::DistantLabel => stages::distant_label(&cfg),
                Command::Train => stages::train_model(&cfg),
                Command::Evaluate { .. } => stages::evaluate_model(&cfg),
                Command::Predict { input } => stages::predict(&cfg, &input),
                Command::Resolver { action } => match action {
                    ResolverAction::Ingest => stages::resolver_ingest(&cfg),
                    ResolverAction::Resolve { mentions } => stages::resolver_resolve(&cfg, &mentions),
                    ResolverAction::Report => stages::resolver_report(&cfg),
                },
                Command::Demo { .. } => unreachable!("handled above"),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        _ => tracing::Level::DEBUG,
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_max_level(level)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
