//! Analytic flop and activation-memory accounting.
//!
//! Counts follow the convention of [`crate::tensor::counter`]: a
//! multiply-accumulate is 2 flops, every softmax-family input element and
//! every exp/tanh/gelu output element is 4, every layer-norm element is 8,
//! and everything else is free. The formulas below mirror the kernels
//! operation by operation, so they agree with the instrumented counter
//! exactly for unpadded inputs.

mod instrumented;
mod throughput;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, FeatureKernel, Overlap, Variant};
use crate::model::{EncoderConfig, Head};
use crate::tasks::DEFAULT_MASK_RATE;
use crate::tensor::counter::{LAYER_NORM, MAC, SOFTMAX, TRANSCENDENTAL};

pub use instrumented::{instrumented_attention_flops, instrumented_model_flops};
pub use throughput::{measure_throughput, Throughput};

/// Masked positions assumed per sequence when costing the masked-LM head.
pub fn mlm_positions(len: usize) -> usize {
    ((len as f64) * DEFAULT_MASK_RATE).round().max(1.0) as usize
}

/// Full-row attention of the first `g` queries.
fn global_rows(n: u64, l: u64, d: u64, g: u64) -> u64 {
    n * (2 * MAC * g * l * d + SOFTMAX * g * l)
}

/// Extra global key columns inside a joint softmax: scores and mixing.
fn global_cols(n: u64, l: u64, d: u64, g: u64) -> u64 {
    n * 2 * MAC * l * g * d
}

/// Forward flops of one attention call on `rows = batch * heads` head rows.
pub fn attention_flops_for_rows(cfg: &AttentionConfig, rows: usize) -> u64 {
    let (n, l, d, g) = (rows as u64, cfg.len as u64, cfg.head_dim as u64, cfg.globals as u64);
    if matches!(cfg.variant, Variant::Exact) {
        return n * (2 * MAC * l * l * d + SOFTMAX * l * l);
    }
    let body = match cfg.variant {
        Variant::Exact => unreachable!(),
        Variant::SlidingWindow { w } => {
            let width = 2 * w as u64 + 1;
            n * (2 * MAC * l * width * d + SOFTMAX * l * (width + g)) + global_cols(n, l, d, g)
        }
        Variant::Blockwise { block, overlap } => {
            let width = match overlap {
                Overlap::None => block as u64,
                Overlap::Half => 2 * block as u64,
            };
            n * (2 * MAC * l * width * d + SOFTMAX * l * (width + g)) + global_cols(n, l, d, g)
        }
        Variant::Lsh { n_hash, chunk, n_buckets } => {
            let (h, w, p) = (n_hash as u64, 2 * chunk as u64, n_buckets as u64 / 2);
            let round = n * (MAC * l * d * p + 2 * MAC * l * w * d + 2 * SOFTMAX * l * (w + g)) + global_cols(n, l, d, g);
            let mix = if h > 1 { SOFTMAX * n * l * h } else { 0 };
            h * round + mix
        }
        Variant::Sinkhorn { block, iters, .. } => {
            let (b, nb) = (block as u64, l / block as u64);
            let perm = n * (MAC * nb * d * nb + 2 * SOFTMAX * nb * nb * iters as u64 + TRANSCENDENTAL * nb * nb);
            let mix = n * 2 * MAC * nb * nb * b * d;
            perm + mix + n * (2 * MAC * l * 2 * b * d + SOFTMAX * l * (2 * b + g)) + global_cols(n, l, d, g)
        }
        Variant::Linformer { ratio } => {
            let kk = l / ratio as u64;
            n * (2 * MAC * kk * l * d + 2 * MAC * l * kk * d + SOFTMAX * l * (kk + g)) + global_cols(n, l, d, g)
        }
        Variant::Nystrom { landmarks, pinv_iters, conv_kernel } => {
            let m = landmarks as u64;
            n * (MAC * (4 * l * m * d + 2 * m * m * d)
                + SOFTMAX * (2 * l * m + m * m)
                + 4 * MAC * m * m * m * pinv_iters as u64
                + MAC * l * d * conv_kernel as u64)
        }
        Variant::Performer { features, kernel } => {
            let r = features as u64;
            let map = match kernel {
                FeatureKernel::Relu => 0,
                FeatureKernel::SoftmaxApprox => 2 * TRANSCENDENTAL * (l * r + l),
            };
            n * (MAC * (2 * l * d * r + 2 * l * r * d + l * r) + map)
        }
        Variant::LongShort { block, landmarks } => {
            let (b, r) = (block as u64, landmarks as u64);
            if r == 0 {
                n * (2 * MAC * l * b * d + SOFTMAX * l * (b + g)) + global_cols(n, l, d, g)
            } else {
                let dynamic = n * (MAC * l * d * r + SOFTMAX * r * l + 2 * MAC * r * l * d);
                dynamic + n * (2 * MAC * l * (b + r) * d + SOFTMAX * l * (b + r + g)) + global_cols(n, l, d, g)
            }
        }
    };
    let glob = if g > 0 { global_rows(n, l, d, g) } else { 0 };
    body + glob
}

/// Attention flops for one sequence across all heads of `cfg`.
pub fn count_attention_flops(cfg: &AttentionConfig) -> u64 {
    attention_flops_for_rows(cfg, cfg.n_heads)
}

/// Forward flops of a model on one sequence, split into the attention part
/// and the total.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelFlops {
    pub attention: u64,
    pub total: u64,
}

/// Head flops for one sequence; the masked-LM head runs on `masked`
/// positions.
pub fn head_flops(enc: &EncoderConfig, head: &Head, len: usize, masked: usize) -> u64 {
    let (dm, l) = (enc.dim as u64, len as u64);
    match *head {
        Head::Mlm => {
            let m = masked as u64;
            MAC * m * dm * dm + TRANSCENDENTAL * m * dm + LAYER_NORM * m * dm + MAC * m * dm * enc.vocab as u64
        }
        Head::Cls { n_classes } => MAC * dm * dm + TRANSCENDENTAL * dm + MAC * dm * n_classes as u64,
        Head::Span => MAC * l * dm * 2,
        Head::Retrieval => 0,
    }
}

/// Encoder plus head flops for one sequence of `len` tokens with `globals`
/// global tokens; embeddings are lookups and cost nothing.
pub fn count_model_flops(enc: &EncoderConfig, head: &Head, len: usize, globals: usize) -> ModelFlops {
    count_model_flops_masked(enc, head, len, globals, mlm_positions(len))
}

pub fn count_model_flops_masked(enc: &EncoderConfig, head: &Head, len: usize, globals: usize, masked: usize) -> ModelFlops {
    let attn = enc.attention_at(len, globals);
    let (l, dm, f) = (len as u64, enc.dim as u64, enc.ffn_dim as u64);
    let projections = if matches!(attn.variant, Variant::Lsh { .. }) { 3 } else { 4 };
    let per_attn = count_attention_flops(&attn);
    let per_layer = 2 * LAYER_NORM * l * dm
        + projections * MAC * l * dm * dm
        + per_attn
        + 2 * MAC * l * dm * f
        + TRANSCENDENTAL * l * f;
    let layers = enc.n_layers as u64;
    let final_ln = if enc.pre_ln { LAYER_NORM * l * dm } else { 0 };
    ModelFlops {
        attention: layers * per_attn,
        total: layers * per_layer + final_ln + head_flops(enc, head, len, masked),
    }
}

/// Score-sized intermediates (scores and probabilities) of one attention
/// call per head row, plus the gathered or compressed key/value copies.
fn attention_elements(cfg: &AttentionConfig) -> u64 {
    let (l, d, g) = (cfg.len as u64, cfg.head_dim as u64, cfg.globals as u64);
    let glob = if g > 0 && !matches!(cfg.variant, Variant::Exact) { 2 * g * l } else { 0 };
    let body = match cfg.variant {
        Variant::Exact => 2 * l * l,
        Variant::SlidingWindow { w } => 2 * l * (2 * w as u64 + 1 + g),
        Variant::Blockwise { block, overlap: Overlap::None } => 2 * l * (block as u64 + g),
        Variant::Blockwise { block, overlap: Overlap::Half } => 2 * l * (2 * block as u64 + g) + 4 * l * d,
        Variant::Lsh { n_hash, chunk, .. } => n_hash as u64 * (2 * l * (2 * chunk as u64 + g) + 4 * l * d),
        Variant::Sinkhorn { block, iters, .. } => {
            let nb = l / block as u64;
            2 * l * (2 * block as u64 + g) + nb * nb * (2 * iters as u64 + 1) + 4 * l * d
        }
        Variant::Linformer { ratio } => {
            let kk = l / ratio as u64;
            2 * l * (kk + g) + 2 * kk * d
        }
        Variant::Nystrom { landmarks, pinv_iters, .. } => {
            let m = landmarks as u64;
            2 * (2 * l * m + m * m) + 4 * m * m * pinv_iters as u64
        }
        Variant::Performer { features, .. } => {
            let r = features as u64;
            2 * l * r + r * d
        }
        Variant::LongShort { block, landmarks } => {
            let (b, r) = (block as u64, landmarks as u64);
            2 * l * (b + r + g) + 2 * r * l + 2 * r * d
        }
    };
    body + glob
}

/// Activation bytes kept for the backward pass of one training step on
/// `batch` sequences, with `bytes_per_scalar`-sized values.
pub fn estimate_peak_memory(enc: &EncoderConfig, len: usize, globals: usize, batch: usize, bytes_per_scalar: usize) -> u64 {
    let attn = enc.attention_at(len, globals);
    let (b, l, dm, f) = (batch as u64, len as u64, enc.dim as u64, enc.ffn_dim as u64);
    // residual input, two norms, q/k/v, attention output, projection, ffn output
    let linear = 9 * l * dm + 2 * l * f;
    let per_layer = linear + enc.n_heads as u64 * attention_elements(&attn);
    let total = b * (enc.n_layers as u64 * per_layer + 2 * l * dm);
    total * bytes_per_scalar as u64
}

/// Cost of one (variant, L) point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostReport {
    pub variant: String,
    pub len: usize,
    /// Block, window, chunk or landmark size of the variant.
    pub block_or_window: usize,
    pub overlap: Option<Overlap>,
    pub globals: usize,
    pub flops: u64,
    pub attention_flops: u64,
    pub peak_memory_bytes: u64,
    pub words_per_sec: Option<f64>,
    /// Free-form machine description recorded with a throughput number.
    pub hardware: Option<String>,
}

impl CostReport {
    /// Analytic part of the report for one sequence of `len` tokens.
    pub fn analytic(enc: &EncoderConfig, head: &Head, len: usize, globals: usize) -> Self {
        let f = count_model_flops(enc, head, len, globals);
        let v = &enc.attention.variant;
        Self {
            variant: v.tag().to_string(),
            len,
            block_or_window: v.scale_param(),
            overlap: v.overlap(),
            globals,
            flops: f.total,
            attention_flops: f.attention,
            peak_memory_bytes: estimate_peak_memory(enc, len, globals, 1, 4),
            words_per_sec: None,
            hardware: None,
        }
    }

    pub fn with_throughput(mut self, words_per_sec: f64, hardware: impl Into<String>) -> Self {
        self.words_per_sec = Some(words_per_sec);
        self.hardware = Some(hardware.into());
        self
    }
}

/// A short description of the machine for throughput provenance.
pub fn hardware_note() -> String {
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{} {} cpus={cpus}", std::env::consts::OS, std::env::consts::ARCH)
}
