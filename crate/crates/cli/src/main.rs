mod commands;
mod draw;
mod errors;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Darknet-format detector toolkit: inspect, run, prune, train and score models.
#[derive(Debug, Parser)]
#[command(name = "slimdet", version, about)]
pub struct Cli {
    /// Seed for every random choice; overrides `seed=` in --config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for the numeric kernels.
    #[arg(long, global = true, env = "SLIMDET_THREADS", value_parser = clap::value_parser!(u16).range(1..))]
    pub threads: Option<u16>,
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// key=value settings file; explicit flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

/// A cfg file, or the name of a bundled network (yolov4, yolov4-tiny, toy).
#[derive(Debug, Args, Clone)]
pub struct NetArgs {
    #[arg(long)]
    pub cfg: String,
    /// Override the input size (multiple of 32 for the yolov4 family).
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Debug, Args, Clone)]
pub struct ModelArgs {
    #[command(flatten)]
    pub net: NetArgs,
    /// Darknet weights; seeded random initialization when omitted.
    #[arg(long)]
    pub weights: Option<PathBuf>,
}

/// Image list plus label directory; synthetic shapes when no list is given.
#[derive(Debug, Args, Clone)]
pub struct DataArgs {
    #[arg(long)]
    pub list: Option<PathBuf>,
    /// Label directory (defaults to `labels/` next to the list).
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Number of synthetic samples when --list is absent.
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
    /// Side of synthetic images.
    #[arg(long, default_value_t = 32)]
    pub image_size: usize,
}

/// Training settings that may also come from --config.
#[derive(Debug, Args, Clone)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// γ L1 penalty; 0 turns sparsity training off.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub mosaic: Option<bool>,
    #[arg(long)]
    pub augment: Option<bool>,
    /// none, backbone or backbone_neck.
    #[arg(long)]
    pub freeze: Option<String>,
    /// Per-epoch loss records as JSON lines.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-layer table: shape, parameters, prunable flag, coupling group.
    Inspect {
        #[command(flatten)]
        net: NetArgs,
    },
    /// Check a cfg (and optionally weights) for structural problems.
    Validate {
        #[command(flatten)]
        net: NetArgs,
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Detect objects in an image or every image of a directory.
    Infer {
        #[command(flatten)]
        model: ModelArgs,
        /// Image file or directory.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = slimdet::detect::DEFAULT_CONF_THRESH)]
        conf: f64,
        #[arg(long, default_value_t = slimdet::detect::DEFAULT_IOU_THRESH)]
        iou: f64,
        /// Detection records file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory for copies of the inputs with boxes drawn.
        #[arg(long)]
        annotate: Option<PathBuf>,
    },
    /// Remove the lowest-|γ| channels network-wide.
    Prune {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 0.5)]
        ratio: f64,
        /// Minimum channels kept per layer.
        #[arg(long, default_value_t = 1)]
        floor: usize,
        /// Minimum fraction of each layer's channels kept.
        #[arg(long, default_value_t = 0.05)]
        floor_fraction: f64,
        #[arg(long)]
        out_cfg: Option<PathBuf>,
        #[arg(long)]
        out_weights: Option<PathBuf>,
        /// Write the pruning report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
        /// `start:end:step` ratios; prints parameter counts per ratio.
        #[arg(long)]
        sweep: Option<String>,
    },
    /// Train the bundled toy network.
    TrainToy {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out_weights: PathBuf,
        /// Also write the toy cfg, handy for later commands.
        #[arg(long)]
        out_cfg: Option<PathBuf>,
    },
    /// Continue training a (typically pruned) model, sparsity off unless set.
    FineTune {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out_weights: PathBuf,
    },
    /// mAP@IoU on a labelled image list.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        #[arg(long, default_value_t = 0.005)]
        conf: f64,
        #[arg(long, default_value_t = slimdet::detect::DEFAULT_IOU_THRESH)]
        nms: f64,
        /// all-point or voc11.
        #[arg(long, default_value = "all-point")]
        ap_interp: String,
        /// Also write the table here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Frames per second of the detect pipeline.
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        /// Directory of images; seeded random inputs when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
    },
    /// Write one mosaic sample and its remapped labels.
    AugmentPreview {
        #[command(flatten)]
        data: DataArgs,
        /// Output side length.
        #[arg(long, default_value_t = 128)]
        size: usize,
        /// Also apply flips, crops, colour jitter and blur.
        #[arg(long)]
        basic: bool,
        #[arg(long)]
        out: PathBuf,
        /// Label file; next to --out when omitted.
        #[arg(long)]
        out_labels: Option<PathBuf>,
    },
    /// Prune at several ratios and tabulate parameters, mAP and FPS.
    Sweep {
        #[command(flatten)]
        model: ModelArgs,
        /// Comma-separated ratios, e.g. 0.2,0.5.
        #[arg(long)]
        ratios: String,
        /// Evaluation set.
        #[command(flatten)]
        data: DataArgs,
        /// Fine-tune each pruned model on synthetic data for this many epochs.
        #[arg(long, default_value_t = 0)]
        fine_tune_epochs: usize,
        /// Timed images per row.
        #[arg(long, default_value_t = 10)]
        n: usize,
    },
    /// Write a synthetic train/test/val split to disk.
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        train: usize,
        #[arg(long, default_value_t = 48)]
        test: usize,
        #[arg(long, default_value_t = 16)]
        val: usize,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_env("SLIMDET_LOG")
        .init();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(usize::from(t))
            .build_global()
        {
            log::warn!("thread pool already set up: {e}");
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(errors::exit_code(&e))
        }
    }
}
