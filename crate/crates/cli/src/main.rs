//! Batch pipeline CLI: every subcommand reads one JSON config, consumes the
//! artifacts of earlier stages, and writes its own artifacts plus a
//! provenance manifest. Logs are JSON lines on stderr; failures print a
//! machine-readable error object and exit nonzero.

mod config;
mod log;
mod manifest;
mod stages;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use config::{Overrides, PipelineConfig};
use satscribe_core::fusion::Level;
use stages::CaptionStream;

#[derive(Parser)]
#[command(
    name = "satscribe",
    version,
    about = "Satellite caption, embedding, SVI-regression, and attribution pipeline"
)]
struct Cli {
    /// Pipeline configuration file.
    #[arg(long, global = true, default_value = "pipeline.json")]
    config: PathBuf,

    /// Override the world seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the training level.
    #[arg(long, global = true, value_enum)]
    level: Option<LevelArg>,

    /// Override the fixture directory.
    #[arg(long, global = true)]
    fixtures: Option<PathBuf>,

    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum LevelArg {
    Tile,
    County,
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    /// Remote LLM captions (or the corpus grammar captions in synthetic mode).
    Llm,
    /// Captions generated by the trained toy captioner.
    Toy,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the seeded synthetic world into the corpus directory.
    Synth,
    /// Obtain captions for every tile.
    Caption {
        #[arg(long, value_enum, default_value = "llm")]
        source: SourceArg,
    },
    /// Parse captions into structured attributes.
    Parse,
    /// Embed captions into 512-dim vectors.
    Encode,
    /// Train the toy contrastive captioner.
    TrainCaptioner,
    /// Train the attention-fusion SVI regressor.
    Train,
    /// Predict per tile and aggregate per county.
    Predict,
    /// Shapley attribution of embedding dimensions.
    Explain,
    /// Render the Markdown and SVG report.
    Report,
    /// Run every stage in order.
    RunAll,
}

fn main() {
    let cli = Cli::parse();
    let overrides = Overrides {
        seed: cli.seed,
        level: cli.level.map(|l| match l {
            LevelArg::Tile => Level::Tile,
            LevelArg::County => Level::County,
        }),
        fixtures: cli.fixtures.clone(),
        out: cli.out.clone(),
    };
    let stage_name = match &cli.command {
        Command::Synth => "synth",
        Command::Caption { .. } => "caption",
        Command::Parse => "parse",
        Command::Encode => "encode",
        Command::TrainCaptioner => "train-captioner",
        Command::Train => "train",
        Command::Predict => "predict",
        Command::Explain => "explain",
        Command::Report => "report",
        Command::RunAll => "run-all",
    };

    let result = PipelineConfig::load(&cli.config, &overrides).and_then(|config| {
        match cli.command {
            Command::Synth => stages::run_synth(&config),
            Command::Caption { source } => stages::run_caption(
                &config,
                match source {
                    SourceArg::Llm => CaptionStream::Llm,
                    SourceArg::Toy => CaptionStream::Toy,
                },
            ),
            Command::Parse => stages::run_parse(&config),
            Command::Encode => stages::run_encode(&config),
            Command::TrainCaptioner => stages::run_train_captioner(&config),
            Command::Train => stages::run_train(&config),
            Command::Predict => stages::run_predict(&config),
            Command::Explain => stages::run_explain(&config),
            Command::Report => stages::run_report(&config),
            Command::RunAll => stages::run_all(&config),
        }
    });

    if let Err(err) = result {
        eprintln!(
            "{}",
            serde_json::json!({"error": {"stage": stage_name, "message": format!("{err:#}")}})
        );
        std::process::exit(1);
    }
}
