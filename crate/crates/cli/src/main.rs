//! `mhm` — marginal heatmap regression experiments.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration
//! error. Every run writes `run.txt` into the output directory with the
//! fully resolved settings, so a run can be reproduced from that file
//! alone.

mod commands;

use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "mhm", version, about = "1D marginal heatmap landmark detection and tracking")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Quantize/recover a coordinate at several heatmap resolutions and
    /// report the quantization error E.
    AnalyzeQuant {
        /// Continuous x coordinate in pixels.
        #[arg(long)]
        p: f64,
        /// Continuous y coordinate in pixels.
        #[arg(long)]
        q: f64,
        /// Face resolution in pixels.
        #[arg(long = "F")]
        face_size: u32,
        /// Comma-separated heatmap resolutions.
        #[arg(long = "L-list", value_delimiter = ',')]
        l_list: Vec<u32>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Generate a synthetic dataset directory.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Trailing `--key value` overrides of config keys.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Train the landmark detector on a dataset directory.
    TrainDetect {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Fraction of samples held out for per-epoch validation.
        #[arg(long, default_value_t = 0.1)]
        val_frac: f64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Train the tracker (detector pretraining, then temporal stages).
    TrainTrack {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory with a clips/ subtree.
        #[arg(long)]
        data: PathBuf,
        /// Fraction of clips held out for per-epoch validation.
        #[arg(long, default_value_t = 0.2)]
        val_frac: f64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// `detector` evaluates stills, `tracker` tracks clips.
        #[arg(long, default_value = "detector")]
        kind: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Train/evaluate the detector across heatmap resolutions.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Parameter ablation: gamma (detector) or lambda (tracker).
    Ablate {
        /// `gamma` or `lambda`.
        #[arg(long)]
        param: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Measure output-buffer bytes for a batch of heatmaps.
    BenchMem {
        /// Landmark count.
        #[arg(long = "N")]
        landmarks: u64,
        /// Comma-separated heatmap resolutions.
        #[arg(long = "L-list", value_delimiter = ',')]
        l_list: Vec<u64>,
        /// `1d` or `2d`: which buffers to actually allocate.
        #[arg(long)]
        kind: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::AnalyzeQuant { p, q, face_size, l_list, out } => {
            commands::analyze_quant(p, q, face_size, &l_list, &out)
        }
        Cmd::GenData { config, out, overrides } => commands::gen_data(config.as_deref(), &out, &overrides),
        Cmd::TrainDetect { config, data, val_frac, out, overrides } => {
            commands::train_detect(config.as_deref(), &data, val_frac, &out, &overrides)
        }
        Cmd::TrainTrack { config, data, val_frac, out, overrides } => {
            commands::train_track(config.as_deref(), &data, val_frac, &out, &overrides)
        }
        Cmd::Eval { config, checkpoint, data, kind, out, overrides } => {
            commands::eval(config.as_deref(), &checkpoint, &data, &kind, &out, &overrides)
        }
        Cmd::Sweep { config, out, overrides } => commands::sweep(config.as_deref(), &out, &overrides),
        Cmd::Ablate { param, config, out, overrides } => {
            commands::ablate(&param, config.as_deref(), &out, &overrides)
        }
        Cmd::BenchMem { landmarks, l_list, kind, out } => {
            commands::bench_mem(landmarks, &l_list, &kind, &out)
        }
    };
    if let Err(e) = result {
        eprintln!("error: {}", e.message);
        std::process::exit(e.code);
    }
}
