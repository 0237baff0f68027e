//! Attention variants sharing one calling convention.
//!
//! Every kernel consumes per-head tensors shaped `[N, L, d]` where
//! `N = batch * heads` (head index = `n % heads`) and returns the same
//! shape. Queries are scaled by `1/sqrt(d)` inside the kernel.

mod exact;
mod global;
mod linformer;
mod local;
mod long_short;
mod lsh;
mod mask;
mod multi_head;
mod nystrom;
mod performer;
mod sinkhorn;

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamSpec};
use crate::tensor::{Scalar, Tensor, Var};

pub use exact::{dense_attend, exact_attention, AttentionOutput};
pub use global::global_rows;
pub use linformer::linformer_attention;
pub use local::{block_attend, masked_attention, sliding_attend};
pub use long_short::long_short_attention;
pub use lsh::{lsh_attention, lsh_attention_rounds, lsh_buckets, LshRound};
pub use mask::{build_mask, AttentionMask};
pub use multi_head::{multi_head, multi_head_specs};
pub use nystrom::{newton_schulz_pinv, nystrom_attention};
pub use performer::{performer_attention, performer_features};
pub use sinkhorn::{sinkhorn_attend_with_perm, sinkhorn_attention, sinkhorn_normalize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Overlap {
    Half,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKernel {
    Relu,
    SoftmaxApprox,
}

/// Variant selector with its hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Variant {
    Exact,
    SlidingWindow {
        /// One-side window.
        w: usize,
    },
    Blockwise {
        block: usize,
        overlap: Overlap,
    },
    Lsh {
        n_hash: usize,
        chunk: usize,
        /// Buckets per round; must be even (half as many signed projections).
        n_buckets: usize,
    },
    Sinkhorn {
        block: usize,
        iters: usize,
        temperature: f64,
        /// Replace the soft permutation by its row argmax.
        hard: bool,
    },
    Linformer {
        ratio: usize,
    },
    Nystrom {
        landmarks: usize,
        pinv_iters: usize,
        /// Odd width of the depthwise value convolution; 0 disables it.
        conv_kernel: usize,
    },
    Performer {
        features: usize,
        kernel: FeatureKernel,
    },
    LongShort {
        block: usize,
        landmarks: usize,
    },
}

pub const VARIANT_TAGS: [&str; 9] =
    ["exact", "sliding_window", "blockwise", "lsh", "sinkhorn", "linformer", "nystrom", "performer", "long_short"];

impl Variant {
    /// Default hyperparameters for a variant tag.
    pub fn defaults(tag: &str) -> Result<Self> {
        Ok(match tag {
            "exact" => Variant::Exact,
            "sliding_window" | "sliding" | "local_window" => Variant::SlidingWindow { w: 256 },
            "blockwise" => Variant::Blockwise { block: 128, overlap: Overlap::Half },
            "lsh" => Variant::Lsh { n_hash: 4, chunk: 16, n_buckets: 8 },
            "sinkhorn" => Variant::Sinkhorn { block: 128, iters: 8, temperature: 0.75, hard: false },
            "linformer" => Variant::Linformer { ratio: 8 },
            "nystrom" => Variant::Nystrom { landmarks: 256, pinv_iters: 6, conv_kernel: 35 },
            "performer" => Variant::Performer { features: 256, kernel: FeatureKernel::Relu },
            "long_short" => Variant::LongShort { block: 128, landmarks: 32 },
            other => return Err(Error::Config(format!("unknown attention variant {other:?}"))),
        })
    }

    /// Compute-matched hyperparameters for the two-layer LRA models, sized
    /// for 4K-token inputs.
    pub fn lra_defaults(tag: &str) -> Result<Self> {
        Ok(match tag {
            "sliding_window" | "sliding" | "local_window" => Variant::SlidingWindow { w: 64 },
            "blockwise" => Variant::Blockwise { block: 64, overlap: Overlap::Half },
            "lsh" => Variant::Lsh { n_hash: 2, chunk: 128, n_buckets: 32 },
            "sinkhorn" => Variant::Sinkhorn { block: 256, iters: 8, temperature: 0.75, hard: false },
            "linformer" => Variant::Linformer { ratio: 16 },
            "nystrom" => Variant::Nystrom { landmarks: 128, pinv_iters: 6, conv_kernel: 35 },
            "performer" => Variant::Performer { features: 128, kernel: FeatureKernel::Relu },
            "long_short" => Variant::LongShort { block: 128, landmarks: 32 },
            other => Variant::defaults(other)?,
        })
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Variant::Exact => "exact",
            Variant::SlidingWindow { .. } => "sliding_window",
            Variant::Blockwise { .. } => "blockwise",
            Variant::Lsh { .. } => "lsh",
            Variant::Sinkhorn { .. } => "sinkhorn",
            Variant::Linformer { .. } => "linformer",
            Variant::Nystrom { .. } => "nystrom",
            Variant::Performer { .. } => "performer",
            Variant::LongShort { .. } => "long_short",
        }
    }

    /// The block, window, chunk or landmark size that sets the variant's
    /// locality/compression scale (0 for exact attention).
    pub fn scale_param(&self) -> usize {
        match *self {
            Variant::Exact => 0,
            Variant::SlidingWindow { w } => w,
            Variant::Blockwise { block, .. } => block,
            Variant::Lsh { chunk, .. } => chunk,
            Variant::Sinkhorn { block, .. } => block,
            Variant::Linformer { ratio } => ratio,
            Variant::Nystrom { landmarks, .. } => landmarks,
            Variant::Performer { features, .. } => features,
            Variant::LongShort { block, .. } => block,
        }
    }

    pub fn overlap(&self) -> Option<Overlap> {
        match self {
            Variant::Blockwise { overlap, .. } => Some(*overlap),
            _ => None,
        }
    }
}

/// Variant plus the geometry it runs at.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub variant: Variant,
    /// Sequence length L.
    pub len: usize,
    /// Per-head dimension d.
    pub head_dim: usize,
    pub n_heads: usize,
    /// Number of global tokens; they occupy the first positions.
    #[serde(default)]
    pub globals: usize,
}

impl AttentionConfig {
    pub fn new(variant: Variant, len: usize, head_dim: usize) -> Self {
        Self { variant, len, head_dim, n_heads: 1, globals: 0 }
    }

    pub fn heads(mut self, n: usize) -> Self {
        self.n_heads = n;
        self
    }

    pub fn with_globals(mut self, g: usize) -> Self {
        self.globals = g;
        self
    }

    pub fn at_len(&self, len: usize) -> Self {
        Self { len, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.len;
        let bad = |m: String| Err(Error::Config(m));
        if l == 0 || self.head_dim == 0 || self.n_heads == 0 {
            return bad("len, head_dim and n_heads must be positive".into());
        }
        if self.globals > l {
            return bad(format!("{} global tokens exceed length {l}", self.globals));
        }
        let divides = |what: &str, p: usize| -> Result<()> {
            if p == 0 || l % p != 0 {
                Err(Error::Config(format!("{what} {p} must divide L={l}")))
            } else {
                Ok(())
            }
        };
        match self.variant {
            Variant::Exact | Variant::SlidingWindow { .. } => {}
            Variant::Blockwise { block, overlap } => {
                divides("block size", block)?;
                if overlap == Overlap::Half && block % 2 != 0 {
                    return bad(format!("half overlap needs an even block, got {block}"));
                }
            }
            Variant::Lsh { n_hash, chunk, n_buckets } => {
                divides("chunk", chunk)?;
                if n_hash == 0 || n_buckets < 2 || n_buckets % 2 != 0 {
                    return bad(format!("lsh needs n_hash >= 1 and an even n_buckets >= 2 (got {n_hash}, {n_buckets})"));
                }
            }
            Variant::Sinkhorn { block, temperature, .. } => {
                divides("sinkhorn block", block)?;
                if !(temperature > 0.0) {
                    return bad(format!("sinkhorn temperature must be positive, got {temperature}"));
                }
            }
            Variant::Linformer { ratio } => divides("compression ratio", ratio)?,
            Variant::Nystrom { landmarks, conv_kernel, .. } => {
                if landmarks > l {
                    return bad(format!("{landmarks} landmarks exceed L={l}"));
                }
                divides("landmark count", landmarks)?;
                if conv_kernel != 0 && conv_kernel % 2 == 0 {
                    return bad(format!("convolution kernel must be odd, got {conv_kernel}"));
                }
            }
            Variant::Performer { features, .. } => {
                if features == 0 {
                    return bad("performer needs at least one random feature".into());
                }
            }
            Variant::LongShort { block, .. } => divides("long-short block", block)?,
        }
        Ok(())
    }
}

/// Per-call geometry and key padding.
#[derive(Clone, Debug)]
pub struct AttnCtx {
    pub batch: usize,
    pub heads: usize,
    pub len: usize,
    /// `[batch * len]`, `false` marks padding keys.
    pub key_valid: Option<Rc<Vec<bool>>>,
}

impl AttnCtx {
    pub fn new(batch: usize, heads: usize, len: usize) -> Self {
        Self { batch, heads, len, key_valid: None }
    }

    pub fn single(len: usize) -> Self {
        Self::new(1, 1, len)
    }

    pub fn with_padding(mut self, valid: Rc<Vec<bool>>) -> Self {
        assert_eq!(valid.len(), self.batch * self.len, "padding flags");
        self.key_valid = Some(valid);
        self
    }

    pub fn rows(&self) -> usize {
        self.batch * self.heads
    }

    /// Whether key `j` of head-row `n` is a real token.
    #[inline]
    pub fn key_ok(&self, n: usize, j: usize) -> bool {
        self.key_valid.as_ref().map_or(true, |v| v[(n / self.heads) * self.len + j])
    }
}

/// Variant-specific tensors for one attention layer.
pub struct AttnVars<'t, T: Scalar = f32> {
    pub sinkhorn_w: Option<Var<'t, T>>,
    pub linformer_e: Option<Var<'t, T>>,
    pub nystrom_conv: Option<Var<'t, T>>,
    pub performer_w: Option<Var<'t, T>>,
    pub ls_proj: Option<Var<'t, T>>,
    pub lsh_rot: Option<Var<'t, T>>,
}

impl<'t, T: Scalar> AttnVars<'t, T> {
    pub fn none() -> Self {
        Self { sinkhorn_w: None, linformer_e: None, nystrom_conv: None, performer_w: None, ls_proj: None, lsh_rot: None }
    }

    /// Looks up the tensors created by [`attention_specs`] under `prefix`.
    pub fn from_bound(b: &Bound<'t, T>, prefix: &str) -> Self {
        let get = |s: &str| b.try_get(&format!("{prefix}{s}"));
        Self {
            sinkhorn_w: get("sinkhorn_w"),
            linformer_e: get("linformer_e"),
            nystrom_conv: get("nystrom_conv"),
            performer_w: get("performer_w"),
            ls_proj: get("ls_proj"),
            lsh_rot: get("lsh_rot"),
        }
    }
}

/// Parameters a variant needs for sequences up to `max_len`.
pub fn attention_specs(cfg: &AttentionConfig, max_len: usize, prefix: &str) -> Vec<ParamSpec> {
    let d = cfg.head_dim;
    let name = |s: &str| format!("{prefix}{s}");
    match cfg.variant {
        Variant::Sinkhorn { block, .. } => {
            vec![ParamSpec::new(name("sinkhorn_w"), &[d, max_len.div_ceil(block)], Init::Normal(0.02))]
        }
        Variant::Linformer { ratio } => {
            let std = (1.0 / max_len as f64).sqrt();
            vec![ParamSpec::new(name("linformer_e"), &[max_len / ratio, max_len], Init::Normal(std))]
        }
        Variant::Nystrom { conv_kernel, .. } if conv_kernel > 0 => {
            vec![ParamSpec::new(name("nystrom_conv"), &[cfg.n_heads, conv_kernel], Init::Normal(0.02))]
        }
        Variant::Performer { features, .. } => {
            vec![ParamSpec::new(name("performer_w"), &[features, d], Init::Normal(1.0)).fixed()]
        }
        Variant::LongShort { landmarks, .. } if landmarks > 0 => {
            vec![ParamSpec::new(name("ls_proj"), &[d, landmarks], Init::Normal(0.02))]
        }
        Variant::Lsh { n_hash, n_buckets, .. } => {
            vec![ParamSpec::new(name("lsh_rot"), &[n_hash, d, n_buckets / 2], Init::Normal(1.0)).fixed()]
        }
        _ => Vec::new(),
    }
}

fn need<'t, T: Scalar>(v: Option<Var<'t, T>>, what: &str) -> Var<'t, T> {
    v.unwrap_or_else(|| panic!("attention variant needs its {what} parameter"))
}

/// Runs the configured variant on `[N, L, d]` inputs, including global
/// tokens. Shapes and parameters are assumed validated by the caller.
pub fn attend<'t, T: Scalar>(
    cfg: &AttentionConfig,
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    ctx: &AttnCtx,
    p: &AttnVars<'t, T>,
) -> Var<'t, T> {
    let g = cfg.globals;
    let out = match cfg.variant {
        Variant::Exact => dense_attend(q, k, v, None, ctx),
        Variant::SlidingWindow { w } => sliding_attend(q, k, v, w, g, ctx),
        Variant::Blockwise { block, overlap } => block_attend(q, k, v, block, overlap, g, ctx),
        Variant::Lsh { n_hash, chunk, .. } => lsh::lsh_attend(q, v, need(p.lsh_rot, "lsh_rot"), n_hash, chunk, g, ctx),
        Variant::Sinkhorn { block, iters, temperature, hard } => {
            sinkhorn::sinkhorn_attend(q, k, v, need(p.sinkhorn_w, "sinkhorn_w"), block, iters, temperature, hard, g, ctx)
        }
        Variant::Linformer { ratio } => linformer::linformer_attend(q, k, v, need(p.linformer_e, "linformer_e"), ratio, g, ctx),
        Variant::Nystrom { landmarks, pinv_iters, .. } => {
            nystrom::nystrom_attend(q, k, v, landmarks, pinv_iters, p.nystrom_conv, ctx)
        }
        Variant::Performer { kernel, .. } => performer::performer_attend(q, k, v, need(p.performer_w, "performer_w"), kernel, ctx),
        Variant::LongShort { block, .. } => long_short::long_short_attend(q, k, v, p.ls_proj, block, g, ctx),
    };
    if g == 0 || matches!(cfg.variant, Variant::Exact) {
        return out;
    }
    let l = ctx.len;
    let glob = global_rows(q, k, v, g, ctx);
    if g == l {
        return glob;
    }
    Var::concat(&[glob, out.slice(1, g, l)], 1)
}

/// Single-sequence, single-head convenience wrapper over [`attend`] on plain
/// tensors `[L, d]`, building the variant's parameters from `params`.
pub fn attend_tensors<T: Scalar>(
    cfg: &AttentionConfig,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    params: &crate::params::ParamStore<T>,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    let (l, d) = (cfg.len, cfg.head_dim);
    for (name, t) in [("q", q), ("k", k), ("v", v)] {
        if t.shape() != [l, d] {
            return Err(crate::error::shape_err("attention", format!("{name} is {:?}, expected [{l}, {d}]", t.shape())));
        }
    }
    let tape = crate::tensor::Tape::new();
    let b = params.bind(&tape);
    let vars = AttnVars::from_bound(&b, "");
    let lift = |t: &Tensor<T>| tape.constant(t.reshape(&[1, l, d]).expect("checked"));
    let single = AttentionConfig { n_heads: 1, ..cfg.clone() };
    let out = attend(&single, lift(q), lift(k), lift(v), &AttnCtx::single(l), &vars);
    tape.check()?;
    out.value().reshape(&[l, d])
}

/// Divides queries by `sqrt(d)`.
pub(crate) fn scale_q<'t, T: Scalar>(q: Var<'t, T>) -> Var<'t, T> {
    let d = q.dim(q.shape().len() - 1);
    q.scale(1.0 / (d as f64).sqrt())
}
