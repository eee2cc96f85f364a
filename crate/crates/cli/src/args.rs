use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "sleepnet", version, about = "Multi-modal sleep-stage classification: data, training, evaluation and checks")]
pub struct Cli {
    /// JSON training configuration; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for every random stream of the command.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Training-log CSV path.
    #[arg(long, global = true, value_name = "PATH")]
    pub log: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic labeled dataset container (--out FILE).
    Synth {
        #[arg(long, default_value_t = 3)]
        recordings: usize,
        /// Epochs per recording.
        #[arg(long, default_value_t = 63)]
        epochs: usize,
    },
    /// Write log-magnitude spectrograms of a dataset: a little-endian f32
    /// `[N,29,129]` binary at --out with a `<out>.json` header, or CSV.
    Spectrogram {
        #[command(flatten)]
        data: DataArgs,
        /// Only this recording index.
        #[arg(long)]
        recording: Option<usize>,
        /// Only this epoch index (within the selected recordings).
        #[arg(long)]
        epoch: Option<usize>,
        /// CSV rows (`recording,epoch,frame,bin0..`) to --out or stdout.
        #[arg(long)]
        csv: bool,
    },
    /// Train both backbones on single epochs (--out checkpoint DIR).
    Stage0 {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Joint contrastive and masked-sequence training (--out checkpoint DIR).
    Pretrain {
        #[command(flatten)]
        data: DataArgs,
        /// Stage-0 checkpoint directory.
        #[arg(long, value_name = "DIR")]
        init: Option<PathBuf>,
        /// Start from random weights when no stage-0 checkpoint is given.
        #[arg(long)]
        from_scratch: bool,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        mask: MaskArgs,
    },
    /// Train the sequence model on frozen backbones (--out checkpoint DIR).
    Finetune {
        #[command(flatten)]
        data: DataArgs,
        /// Pre-training checkpoint directory.
        #[arg(long, value_name = "DIR")]
        init: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Score a checkpoint; prints metrics JSON (also to --out FILE).
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_name = "DIR")]
        checkpoint: PathBuf,
    },
    /// Train ablation variants and write a comparison report (--out DIR).
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        /// Comma-separated variant names; all seven when absent.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        /// Run the mask-ratio sweep (0.15, 0.5, 0.7) instead of the variants.
        #[arg(long)]
        mask_sweep: bool,
        #[arg(long, default_value_t = 300)]
        stage0_steps: usize,
        #[arg(long, default_value_t = 2000)]
        pretrain_steps: usize,
        #[arg(long, default_value_t = 500)]
        finetune_steps: usize,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck,
    /// Print the layer table of the configured network as JSON (also to --out FILE).
    Describe {
        #[arg(long, value_enum, default_value_t = Scale::Desk)]
        scale: Scale,
    },
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// Dataset: `.slpd` container or `.csv` fixture (3000 samples and a label per row).
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Scale {
    /// Reduced widths and batch size for one CPU core.
    Desk,
    /// Full published sizes.
    Paper,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Default configuration the file and flags modify.
    #[arg(long, value_enum, default_value_t = Scale::Desk)]
    pub scale: Scale,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Sequences per batch.
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub validate_every: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Disable data augmentation.
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Args, Debug)]
pub struct MaskArgs {
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    #[arg(long, value_enum)]
    pub mask_mode: Option<MaskModeArg>,
    /// Drop the InfoNCE epoch loss.
    #[arg(long)]
    pub no_contrastive: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MaskModeArg {
    Independent,
    Complementary,
}
