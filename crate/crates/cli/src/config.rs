//! Run configuration: JSON file defaults, command-line overrides, and the
//! per-command defaults that fill in whatever is left.

use std::path::{Path, PathBuf};

use longattn_core::attention::{FeatureKernel, Overlap, Variant, VARIANT_TAGS};
use longattn_core::train::{AdamConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "LONGATTN_OUT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Lra,
    Mlm,
    Finetune,
    Bench,
    Check,
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Lra => "lra",
            Command::Mlm => "mlm",
            Command::Finetune => "finetune",
            Command::Bench => "bench",
            Command::Check => "check",
            Command::Report => "report",
        }
    }
}

/// Which default table variant hyperparameters come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hparams {
    /// Settings of the pretraining comparison.
    Pretrain,
    /// Compute-matched settings of the two-layer LRA models.
    Lra,
}

/// Every field is optional so that a config file, the command line and the
/// command's defaults can be layered. After [`RunConfig::resolve`] every
/// field the command reads is set; that resolved form is what gets echoed
/// to `config.json`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub command: Option<Command>,

    /// Attention variant tags, or `["all"]`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hparams: Option<Hparams>,
    /// Block size of blockwise, Sinkhorn and Long-Short attention; several
    /// values make a sweep.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub block: Option<Vec<usize>>,
    /// One-side sliding window; several values make a sweep.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub overlap: Option<Overlap>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_hash: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chunk: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_buckets: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sinkhorn_iters: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hard: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ratio: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub landmarks: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pinv_iters: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conv_kernel: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub features: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel: Option<FeatureKernel>,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    /// Sequence lengths; several values make a sweep.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub len: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub globals: Option<usize>,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_depth: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus_bytes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_file: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_file: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_checkpoint: Option<PathBuf>,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub updates: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    /// Global gradient-norm clip; 0 disables clipping.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adam: Option<AdamConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log_every: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_every: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<Vec<u64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub save_checkpoints: Option<bool>,

    /// Measure train-step throughput in `bench`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub measure: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub duration_secs: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bench_batch: Option<usize>,

    /// Check suites to run; all when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub suites: Option<Vec<String>>,

    /// Run directories (or roots containing them) read by `report`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub runs: Option<Vec<PathBuf>>,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

macro_rules! overlay {
    ($dst:ident, $src:ident; $($f:ident),* $(,)?) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f.clone(); } )*
    };
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// Fields set in `other` replace those of `self`.
    pub fn overlay(&mut self, other: &RunConfig) {
        overlay!(self, other;
            command, variant, hparams, block, window, overlap, n_hash, chunk, n_buckets, sinkhorn_iters, temperature,
            hard, ratio, landmarks, pinv_iters, conv_kernel, features, kernel, preset, task, len, globals, max_depth,
            train_size, dev_size, data_seed, corpus_bytes, mask_rate, train_file, dev_file, init_checkpoint, lr, warmup,
            updates, batch_size, clip_norm, adam, log_every, eval_every, seed, save_checkpoints, measure, duration_secs,
            bench_batch, suites, runs, out_dir,
        );
    }

    /// Fills every unset field the command uses with its default.
    pub fn resolve(mut self, command: Command) -> Result<Self, CliError> {
        if let Some(c) = self.command {
            if c != command {
                return Err(CliError::Usage(format!("config is for `{}` but `{}` was run", c.name(), command.name())));
            }
        }
        self.command = Some(command);
        let out_root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
        self.out_dir.get_or_insert_with(|| out_root.join(command.name()));
        macro_rules! def {
            ($f:ident, $v:expr) => {
                self.$f.get_or_insert_with(|| $v);
            };
        }
        let training = matches!(command, Command::Lra | Command::Mlm | Command::Finetune);
        match command {
            Command::Lra => {
                def!(variant, vec!["exact".into()]);
                def!(hparams, Hparams::Lra);
                def!(preset, "lra2".into());
                def!(task, "listops".into());
                def!(len, vec![512]);
                def!(globals, 1);
                def!(max_depth, 3);
                def!(train_size, 20_000);
                def!(dev_size, 1_000);
                def!(updates, 20_000);
                def!(batch_size, 32);
            }
            Command::Mlm => {
                def!(variant, vec!["blockwise".into()]);
                def!(hparams, Hparams::Pretrain);
                def!(preset, "tiny-mlm".into());
                def!(task, "synthetic".into());
                def!(len, vec![512]);
                def!(globals, 0);
                def!(corpus_bytes, 1 << 20);
                def!(mask_rate, longattn_core::tasks::DEFAULT_MASK_RATE);
                def!(dev_size, 64);
                def!(updates, 5_000);
                def!(batch_size, 16);
            }
            Command::Finetune => {
                def!(variant, vec!["blockwise".into()]);
                def!(hparams, Hparams::Pretrain);
                def!(preset, "tiny-mlm".into());
                def!(task, "span".into());
                def!(len, vec![512]);
                def!(globals, 1);
                def!(updates, 2_000);
                def!(batch_size, 8);
                if self.train_file.is_none() || self.dev_file.is_none() {
                    return Err(CliError::Usage("finetune needs --train-file and --dev-file".into()));
                }
            }
            Command::Bench => {
                def!(variant, vec!["all".into()]);
                def!(hparams, Hparams::Pretrain);
                def!(preset, "lra2".into());
                def!(task, "cost".into());
                def!(len, vec![4096]);
                def!(globals, 1);
                def!(measure, false);
                def!(duration_secs, 10.0);
                def!(bench_batch, 1);
                def!(seed, vec![0]);
            }
            Command::Check => {
                def!(variant, vec!["all".into()]);
                def!(seed, vec![0]);
                def!(suites, longattn_core::checks::Suite::ALL.iter().map(|s| s.name().to_string()).collect());
            }
            Command::Report => {
                if self.runs.as_ref().map_or(true, |r| r.is_empty()) {
                    return Err(CliError::Usage("report needs at least one --runs directory".into()));
                }
            }
        }
        if training {
            let base = TrainConfig::default();
            def!(lr, vec![base.lr]);
            def!(warmup, vec![base.warmup]);
            def!(clip_norm, base.clip_norm.unwrap_or(0.0));
            def!(adam, base.adam);
            def!(log_every, 100);
            def!(eval_every, 1000);
            def!(seed, vec![base.seed]);
            def!(data_seed, 1234);
            def!(save_checkpoints, true);
        }
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Usage(m));
        if let Some(vs) = &self.variant {
            if vs.is_empty() {
                return bad("at least one variant is required".into());
            }
            for v in vs {
                if v != "all" && !VARIANT_TAGS.contains(&v.as_str()) {
                    return bad(format!("unknown variant {v:?}; expected one of {VARIANT_TAGS:?} or all"));
                }
            }
        }
        for (name, list) in [("len", &self.len), ("block", &self.block), ("window", &self.window)] {
            if list.as_ref().is_some_and(|l| l.is_empty() || l.contains(&0)) {
                return bad(format!("{name} values must be positive"));
            }
        }
        if self.seed.as_ref().is_some_and(|s| s.is_empty()) || self.lr.as_ref().is_some_and(|s| s.is_empty()) {
            return bad("seed and lr lists must not be empty".into());
        }
        Ok(())
    }

    pub fn out_dir(&self) -> &Path {
        self.out_dir.as_deref().expect("resolved")
    }

    pub fn seeds(&self) -> &[u64] {
        self.seed.as_deref().unwrap_or(&[0])
    }

    pub fn lens(&self) -> &[usize] {
        self.len.as_deref().expect("resolved")
    }

    /// Expanded variant tags in canonical order.
    pub fn variant_tags(&self) -> Vec<String> {
        let vs = self.variant.as_deref().unwrap_or(&[]);
        if vs.iter().any(|v| v == "all") {
            VARIANT_TAGS.iter().map(|s| s.to_string()).collect()
        } else {
            vs.to_vec()
        }
    }

    fn base_variant(&self, tag: &str) -> Result<Variant, CliError> {
        Ok(match self.hparams.unwrap_or(Hparams::Pretrain) {
            Hparams::Pretrain => Variant::defaults(tag)?,
            Hparams::Lra => Variant::lra_defaults(tag)?,
        })
    }

    /// Every concrete variant the run set covers: each tag with the
    /// overrides applied, swept over `block` or `window` where they apply.
    pub fn variants(&self) -> Result<Vec<Variant>, CliError> {
        let mut out = Vec::new();
        for tag in self.variant_tags() {
            let base = self.base_variant(&tag)?;
            let sweep: Vec<Option<usize>> = match base {
                Variant::SlidingWindow { .. } => self.window.as_ref().map_or(vec![None], |w| w.iter().map(|&x| Some(x)).collect()),
                Variant::Blockwise { .. } | Variant::Sinkhorn { .. } | Variant::LongShort { .. } => {
                    self.block.as_ref().map_or(vec![None], |b| b.iter().map(|&x| Some(x)).collect())
                }
                _ => vec![None],
            };
            for s in sweep {
                out.push(self.apply(base.clone(), s));
            }
        }
        Ok(out)
    }

    fn apply(&self, v: Variant, scale: Option<usize>) -> Variant {
        let or = |o: Option<usize>, d: usize| o.unwrap_or(d);
        match v {
            Variant::Exact => Variant::Exact,
            Variant::SlidingWindow { w } => Variant::SlidingWindow { w: or(scale, w) },
            Variant::Blockwise { block, overlap } => {
                Variant::Blockwise { block: or(scale, block), overlap: self.overlap.unwrap_or(overlap) }
            }
            Variant::Lsh { n_hash, chunk, n_buckets } => {
                Variant::Lsh { n_hash: or(self.n_hash, n_hash), chunk: or(self.chunk, chunk), n_buckets: or(self.n_buckets, n_buckets) }
            }
            Variant::Sinkhorn { block, iters, temperature, hard } => Variant::Sinkhorn {
                block: or(scale, block),
                iters: or(self.sinkhorn_iters, iters),
                temperature: self.temperature.unwrap_or(temperature),
                hard: self.hard.unwrap_or(hard),
            },
            Variant::Linformer { ratio } => Variant::Linformer { ratio: or(self.ratio, ratio) },
            Variant::Nystrom { landmarks, pinv_iters, conv_kernel } => Variant::Nystrom {
                landmarks: or(self.landmarks, landmarks),
                pinv_iters: or(self.pinv_iters, pinv_iters),
                conv_kernel: or(self.conv_kernel, conv_kernel),
            },
            Variant::Performer { features, kernel } => {
                Variant::Performer { features: or(self.features, features), kernel: self.kernel.unwrap_or(kernel) }
            }
            Variant::LongShort { block, landmarks } => {
                Variant::LongShort { block: or(scale, block), landmarks: or(self.landmarks, landmarks) }
            }
        }
    }

    /// Training settings for one seed, learning rate and warmup.
    pub fn train_config(&self, seed: u64, lr: f64, warmup: f64) -> TrainConfig {
        let clip = self.clip_norm.unwrap_or(0.0);
        TrainConfig {
            lr,
            warmup,
            updates: self.updates.unwrap_or(0),
            batch_size: self.batch_size.unwrap_or(1),
            seed,
            clip_norm: (clip > 0.0).then_some(clip),
            adam: self.adam.unwrap_or_default(),
            log_every: self.log_every.unwrap_or(100),
            eval_every: self.eval_every.unwrap_or(0),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"lr": [0.001]}"#).is_ok());
        assert!(RunConfig::from_json(r#"{"learning_rate": 0.001}"#).is_err());
    }

    #[test]
    fn flags_override_file() {
        let mut file = RunConfig::from_json(r#"{"updates": 10, "batch_size": 4}"#).unwrap();
        let flags = RunConfig { updates: Some(20), ..Default::default() };
        file.overlay(&flags);
        assert_eq!((file.updates, file.batch_size), (Some(20), Some(4)));
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig { out_dir: Some("x".into()), ..Default::default() }.resolve(Command::Lra).unwrap();
        let back = RunConfig::from_json(&cfg.to_json()).unwrap().resolve(Command::Lra).unwrap();
        assert_eq!(back, cfg);
        assert!(back.clone().resolve(Command::Mlm).is_err());
    }

    #[test]
    fn block_sweep_expands() {
        let cfg = RunConfig {
            variant: Some(vec!["blockwise".into(), "exact".into()]),
            block: Some(vec![64, 128]),
            overlap: Some(Overlap::None),
            ..Default::default()
        };
        let vs = cfg.variants().unwrap();
        assert_eq!(vs.len(), 3);
        assert_eq!(vs[1], Variant::Blockwise { block: 128, overlap: Overlap::None });
    }
}
