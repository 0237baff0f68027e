//! Command-line flags. Every flag mirrors a [`RunConfig`] field and is
//! optional; `--config` names a JSON file supplying defaults.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use longattn_core::attention::{FeatureKernel, Overlap};

use crate::config::{Command, Hparams, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "longattn", version, about = "Efficient attention variants: training runs, cost reports and self-checks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Sub,
}

#[derive(Debug, Subcommand)]
pub enum Sub {
    /// Train on generated ListOps, byte-level text classification or matching.
    Lra(Flags),
    /// Masked language model pretraining on a synthetic corpus.
    Mlm(Flags),
    /// Fine-tune on JSONL long-document tasks (span, cls, retrieval).
    Finetune(Flags),
    /// Analytic cost reports, optionally with measured throughput.
    Bench(Flags),
    /// Oracle, limit, gradient, receptive-field, flop and Performer suites.
    Check(Flags),
    /// Aggregate finished runs into summary tables.
    Report(Flags),
}

impl Sub {
    pub fn split(self) -> (Command, Flags) {
        match self {
            Sub::Lra(f) => (Command::Lra, f),
            Sub::Mlm(f) => (Command::Mlm, f),
            Sub::Finetune(f) => (Command::Finetune, f),
            Sub::Bench(f) => (Command::Bench, f),
            Sub::Check(f) => (Command::Check, f),
            Sub::Report(f) => (Command::Report, f),
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum OverlapArg {
    Half,
    None,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum KernelArg {
    Relu,
    SoftmaxApprox,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum HparamsArg {
    Pretrain,
    Lra,
}

#[derive(Debug, Default, Args)]
pub struct Flags {
    /// JSON config file; flags given on the command line take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Attention variants (comma separated) or `all`.
    #[arg(long, value_delimiter = ',')]
    pub variant: Option<Vec<String>>,
    /// Default hyperparameter table for the variants.
    #[arg(long, value_enum)]
    pub hparams: Option<HparamsArg>,
    /// Block sizes (comma separated sweep).
    #[arg(long, value_delimiter = ',')]
    pub block: Option<Vec<usize>>,
    /// One-side sliding windows (comma separated sweep).
    #[arg(long, value_delimiter = ',')]
    pub window: Option<Vec<usize>>,
    #[arg(long, value_enum)]
    pub overlap: Option<OverlapArg>,
    #[arg(long)]
    pub n_hash: Option<usize>,
    #[arg(long)]
    pub chunk: Option<usize>,
    #[arg(long)]
    pub n_buckets: Option<usize>,
    #[arg(long)]
    pub sinkhorn_iters: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub hard: Option<bool>,
    #[arg(long)]
    pub ratio: Option<usize>,
    #[arg(long)]
    pub landmarks: Option<usize>,
    #[arg(long)]
    pub pinv_iters: Option<usize>,
    #[arg(long)]
    pub conv_kernel: Option<usize>,
    #[arg(long)]
    pub features: Option<usize>,
    #[arg(long, value_enum)]
    pub kernel: Option<KernelArg>,

    /// Encoder preset: lra2, tiny-mlm or roberta-large-shape.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub task: Option<String>,
    /// Sequence lengths (comma separated sweep).
    #[arg(long = "L", alias = "len", value_delimiter = ',')]
    pub len: Option<Vec<usize>>,
    /// Number of global tokens at the start of each sequence.
    #[arg(long = "g", alias = "globals")]
    pub globals: Option<usize>,

    #[arg(long)]
    pub max_depth: Option<usize>,
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long)]
    pub dev_size: Option<usize>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub corpus_bytes: Option<usize>,
    #[arg(long)]
    pub mask_rate: Option<f64>,
    #[arg(long)]
    pub train_file: Option<PathBuf>,
    #[arg(long)]
    pub dev_file: Option<PathBuf>,
    /// Checkpoint whose encoder weights initialize fine-tuning.
    #[arg(long = "init", alias = "init-checkpoint")]
    pub init_checkpoint: Option<PathBuf>,

    /// Peak learning rates (comma separated grid).
    #[arg(long, value_delimiter = ',')]
    pub lr: Option<Vec<f64>>,
    /// Warmup fractions (comma separated grid).
    #[arg(long, value_delimiter = ',')]
    pub warmup: Option<Vec<f64>>,
    #[arg(long)]
    pub updates: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Global gradient-norm clip; 0 disables.
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub log_every: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Seeds (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub seed: Option<Vec<u64>>,
    #[arg(long)]
    pub save_checkpoints: Option<bool>,

    /// Measure train-step throughput (bench).
    #[arg(long)]
    pub measure: bool,
    #[arg(long)]
    pub duration_secs: Option<f64>,
    #[arg(long)]
    pub bench_batch: Option<usize>,

    /// Check suites (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub suites: Option<Vec<String>>,

    /// Run directories or roots to aggregate (report).
    #[arg(long, value_delimiter = ',')]
    pub runs: Option<Vec<PathBuf>>,

    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

impl Flags {
    pub fn to_config(&self) -> RunConfig {
        RunConfig {
            command: None,
            variant: self.variant.clone(),
            hparams: self.hparams.map(|h| match h {
                HparamsArg::Pretrain => Hparams::Pretrain,
                HparamsArg::Lra => Hparams::Lra,
            }),
            block: self.block.clone(),
            window: self.window.clone(),
            overlap: self.overlap.map(|o| match o {
                OverlapArg::Half => Overlap::Half,
                OverlapArg::None => Overlap::None,
            }),
            n_hash: self.n_hash,
            chunk: self.chunk,
            n_buckets: self.n_buckets,
            sinkhorn_iters: self.sinkhorn_iters,
            temperature: self.temperature,
            hard: self.hard,
            ratio: self.ratio,
            landmarks: self.landmarks,
            pinv_iters: self.pinv_iters,
            conv_kernel: self.conv_kernel,
            features: self.features,
            kernel: self.kernel.map(|k| match k {
                KernelArg::Relu => FeatureKernel::Relu,
                KernelArg::SoftmaxApprox => FeatureKernel::SoftmaxApprox,
            }),
            preset: self.preset.clone(),
            task: self.task.clone(),
            len: self.len.clone(),
            globals: self.globals,
            max_depth: self.max_depth,
            train_size: self.train_size,
            dev_size: self.dev_size,
            data_seed: self.data_seed,
            corpus_bytes: self.corpus_bytes,
            mask_rate: self.mask_rate,
            train_file: self.train_file.clone(),
            dev_file: self.dev_file.clone(),
            init_checkpoint: self.init_checkpoint.clone(),
            lr: self.lr.clone(),
            warmup: self.warmup.clone(),
            updates: self.updates,
            batch_size: self.batch_size,
            clip_norm: self.clip_norm,
            adam: None,
            log_every: self.log_every,
            eval_every: self.eval_every,
            seed: self.seed.clone(),
            save_checkpoints: self.save_checkpoints,
            measure: self.measure.then_some(true),
            duration_secs: self.duration_secs,
            bench_batch: self.bench_batch,
            suites: self.suites.clone(),
            runs: self.runs.clone(),
            out_dir: self.out_dir.clone(),
        }
    }
}
