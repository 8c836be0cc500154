//! `curvex`: expand a curvilinear-object segmentation dataset with
//! caption-conditioned diffusion and evaluate the result.
//!
//! Exit codes: 0 success, 1 validation/configuration error, 2 runtime
//! failure.

mod commands;
mod config;
mod util;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;
use curvex::error::Error;

#[derive(Parser)]
#[command(
    name = "curvex",
    version,
    about = "curvilinear dataset expansion pipeline"
)]
struct Cli {
    /// TOML run configuration; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the procedural toy corpus (images, masks, captions).
    Toygen {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Normalize an external dataset (images/, masks/, captions.jsonl).
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        name: Option<String>,
    },
    /// Train the base text-conditioned denoiser.
    TrainBase {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the semantic-map control branch on top of a base checkpoint.
    TrainControl {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// e.g. "down1,down3,middle" or "none"
        #[arg(long)]
        spade_stages: Option<String>,
        #[arg(long)]
        base: Option<PathBuf>,
        /// Suffix for the checkpoint name (control_<tag>.ntc).
        #[arg(long)]
        tag: Option<String>,
    },
    /// Run the three-step expansion and write the synthetic dataset.
    Expand {
        #[arg(long)]
        ratio: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        control: Option<PathBuf>,
        /// Suffix for the output directory (synth_r<k>_<tag>).
        #[arg(long)]
        tag: Option<String>,
        /// Separate checkpoint for semantic-map generation (two-generator
        /// mode); defaults to the control checkpoint's base model.
        #[arg(long)]
        segmap_base: Option<PathBuf>,
    },
    /// Train the segmenter per method/ratio/seed and emit the comparison.
    Eval {
        /// Comma-separated subset of: original, cutout, flip_rotate, scp.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Rebuild the comparison table and plots from stored reports.
    Report,
}

fn run(cli: Cli) -> Result<(), Error> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.cmd {
        Cmd::Toygen { n, seed, out } => commands::cmd_toygen(&cfg, n, seed, out),
        Cmd::Ingest { input, name } => commands::cmd_ingest(&cfg, &input, name),
        Cmd::TrainBase { steps, seed } => commands::cmd_train_base(&cfg, steps, seed),
        Cmd::TrainControl {
            steps,
            seed,
            spade_stages,
            base,
            tag,
        } => commands::cmd_train_control(&cfg, steps, seed, spade_stages, base, tag),
        Cmd::Expand {
            ratio,
            seed,
            control,
            tag,
            segmap_base,
        } => commands::cmd_expand(&cfg, ratio, seed, control, tag, segmap_base),
        Cmd::Eval {
            methods,
            ratios,
            seeds,
        } => commands::cmd_eval(&cfg, methods, ratios, seeds),
        Cmd::Report => commands::cmd_report(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Data(_) | Error::Shape(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
