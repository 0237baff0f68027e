//! Pre-layer-norm transformer encoder over any attention variant, with the
//! task heads and their losses.

mod checkpoint;
pub mod loss;

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::attention::{multi_head, multi_head_specs, AttentionConfig, AttnCtx, Variant};
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamSpec, ParamStore};
use crate::tensor::{Rng, Scalar, Var, LAYER_NORM_EPS};
use crate::vocab;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use loss::{
    cls_logits, cls_loss, cross_entropy, inbatch_nll, mlm_logits, mlm_loss, retrieval_loss, retrieval_scores, span_logits,
    span_loss, span_nll,
};

/// Architecture of the encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub n_layers: usize,
    /// Model width D.
    pub dim: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    /// Largest sequence length the position table covers.
    pub max_len: usize,
    pub vocab: usize,
    pub attention: AttentionConfig,
    #[serde(default = "yes")]
    pub pre_ln: bool,
}

fn yes() -> bool {
    true
}

pub const PRESETS: [&str; 3] = ["lra2", "tiny-mlm", "roberta-large-shape"];

impl EncoderConfig {
    pub fn new(n_layers: usize, dim: usize, n_heads: usize, ffn_dim: usize, max_len: usize, variant: Variant) -> Self {
        let head_dim = if n_heads == 0 { 0 } else { dim / n_heads };
        Self {
            n_layers,
            dim,
            n_heads,
            ffn_dim,
            max_len,
            vocab: vocab::SIZE,
            attention: AttentionConfig::new(variant, max_len, head_dim).heads(n_heads),
            pre_ln: true,
        }
    }

    /// Named architectures. `roberta-large-shape` only exists for cost
    /// accounting; it is far too large to train here.
    pub fn preset(name: &str, variant: Variant, max_len: usize) -> Result<Self> {
        let (layers, dim, heads, ffn) = match name {
            "lra2" => (2, 64, 2, 128),
            "tiny-mlm" => (4, 128, 4, 512),
            "roberta-large-shape" => (24, 1024, 16, 4096),
            _ => return Err(Error::Config(format!("unknown preset {name:?}; expected one of {PRESETS:?}"))),
        };
        let cfg = Self::new(layers, dim, heads, ffn, max_len, variant);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.n_heads == 0 || self.dim % self.n_heads != 0 {
            return Err(Error::Config(format!("model width {} not divisible by {} heads", self.dim, self.n_heads)));
        }
        if self.attention.n_heads != self.n_heads || self.attention.head_dim != self.head_dim() {
            return Err(Error::Config(format!(
                "attention geometry ({} heads x {}) disagrees with the encoder ({} heads x {})",
                self.attention.n_heads,
                self.attention.head_dim,
                self.n_heads,
                self.head_dim()
            )));
        }
        if self.ffn_dim == 0 || self.max_len == 0 || self.vocab == 0 {
            return Err(Error::Config("ffn_dim, max_len and vocab must be positive".into()));
        }
        if self.attention.len > self.max_len {
            return Err(Error::Config(format!("attention length {} exceeds max_len {}", self.attention.len, self.max_len)));
        }
        self.attention.validate()
    }

    /// Attention settings for a batch of length `len` with `g` global tokens.
    pub fn attention_at(&self, len: usize, g: usize) -> AttentionConfig {
        self.attention.at_len(len).with_globals(g)
    }
}

/// Task head on top of the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Head {
    Mlm,
    Cls { n_classes: usize },
    Span,
    Retrieval,
}

pub fn layer_prefix(i: usize) -> String {
    format!("layer{i}.")
}

/// Every parameter of the encoder plus `head`.
pub fn model_specs(cfg: &EncoderConfig, head: Head) -> Vec<ParamSpec> {
    let d = cfg.dim;
    let ln = |p: &str| [ParamSpec::new(format!("{p}gain"), &[d], Init::Ones), ParamSpec::new(format!("{p}bias"), &[d], Init::Zeros)];
    let mut specs = vec![
        ParamSpec::new("tok_emb", &[cfg.vocab, d], Init::Normal(0.02)),
        ParamSpec::new("pos_emb", &[cfg.max_len, d], Init::Normal(0.02)),
    ];
    for i in 0..cfg.n_layers {
        let p = layer_prefix(i);
        specs.extend(ln(&format!("{p}ln1.")));
        specs.extend(multi_head_specs(&cfg.attention, d, cfg.max_len, &format!("{p}attn.")));
        specs.extend(ln(&format!("{p}ln2.")));
        specs.push(ParamSpec::new(format!("{p}ffn.w1"), &[d, cfg.ffn_dim], Init::Normal(0.02)));
        specs.push(ParamSpec::new(format!("{p}ffn.b1"), &[cfg.ffn_dim], Init::Zeros));
        specs.push(ParamSpec::new(format!("{p}ffn.w2"), &[cfg.ffn_dim, d], Init::Normal(0.02)));
        specs.push(ParamSpec::new(format!("{p}ffn.b2"), &[d], Init::Zeros));
    }
    specs.extend(ln("final_ln."));
    match head {
        Head::Mlm => {
            specs.push(ParamSpec::new("mlm.w", &[d, d], Init::Normal(0.02)));
            specs.push(ParamSpec::new("mlm.b", &[d], Init::Zeros));
            specs.extend(ln("mlm.ln."));
            specs.push(ParamSpec::new("mlm.out_bias", &[cfg.vocab], Init::Zeros));
        }
        Head::Cls { n_classes } => {
            specs.push(ParamSpec::new("cls.w1", &[d, d], Init::Normal(0.02)));
            specs.push(ParamSpec::new("cls.b1", &[d], Init::Zeros));
            specs.push(ParamSpec::new("cls.w2", &[d, n_classes], Init::Normal(0.02)));
            specs.push(ParamSpec::new("cls.b2", &[n_classes], Init::Zeros));
        }
        Head::Span => {
            specs.push(ParamSpec::new("span.w", &[d, 2], Init::Normal(0.02)));
            specs.push(ParamSpec::new("span.b", &[2], Init::Zeros));
        }
        Head::Retrieval => {}
    }
    specs
}

/// Configuration, head and weights together.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    pub cfg: EncoderConfig,
    pub head: Head,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn init(cfg: EncoderConfig, head: Head, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if let Head::Cls { n_classes } = head {
            if n_classes < 2 {
                return Err(Error::Config(format!("classification needs at least 2 classes, got {n_classes}")));
            }
        }
        let params = ParamStore::init(&model_specs(&cfg, head), &mut Rng::new(seed))?;
        Ok(Self { cfg, head, params })
    }

    /// The same encoder under a freshly initialized `head`: every tensor the
    /// new model shares by name and shape with `self` is copied over.
    pub fn with_head(&self, head: Head, seed: u64) -> Result<Self> {
        let mut fresh = Self::init(self.cfg.clone(), head, seed)?;
        for (name, t, _) in self.params.iter() {
            if fresh.params.get(name).is_some_and(|f| f.shape() == t.shape()) {
                fresh.params.set(name, t.clone())?;
            }
        }
        Ok(fresh)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { cfg: self.cfg.clone(), head: self.head, params: self.params.cast() }
    }
}

/// Supervision attached to a batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum Labels {
    #[default]
    None,
    Class(Vec<usize>),
    /// Flat positions `b * len + i` with the original tokens.
    Masked { positions: Vec<usize>, targets: Vec<u32> },
    /// Gold `(start, end)` pairs per sequence; an empty set excludes the
    /// sequence from the loss.
    Spans(Vec<Vec<(usize, usize)>>),
}

/// Token ids of a padded batch, row-major `[batch, len]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchInput {
    pub batch: usize,
    pub len: usize,
    pub tokens: Vec<u32>,
    /// `false` marks padding.
    pub valid: Vec<bool>,
    /// Leading positions that attend and are attended globally.
    pub globals: usize,
    pub labels: Labels,
}

impl BatchInput {
    /// Right-pads every sequence to `len` (or the longest one when `None`).
    pub fn from_sequences(seqs: &[Vec<u32>], len: Option<usize>, globals: usize) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let len = len.unwrap_or_else(|| seqs.iter().map(Vec::len).max().unwrap_or(0));
        let mut tokens = Vec::with_capacity(seqs.len() * len);
        let mut valid = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            if s.len() > len {
                return Err(Error::InvalidArgument(format!("sequence of {} tokens exceeds batch length {len}", s.len())));
            }
            tokens.extend_from_slice(s);
            tokens.extend(std::iter::repeat(vocab::PAD).take(len - s.len()));
            valid.extend(std::iter::repeat(true).take(s.len()));
            valid.extend(std::iter::repeat(false).take(len - s.len()));
        }
        Ok(Self { batch: seqs.len(), len, tokens, valid, globals, labels: Labels::None })
    }

    pub fn with_labels(mut self, labels: Labels) -> Self {
        self.labels = labels;
        self
    }

    pub fn has_padding(&self) -> bool {
        self.valid.iter().any(|v| !v)
    }

    pub fn validate(&self, cfg: &EncoderConfig) -> Result<()> {
        let n = self.batch * self.len;
        if self.batch == 0 || self.len == 0 {
            return Err(Error::Empty("batch"));
        }
        if self.tokens.len() != n || self.valid.len() != n {
            return Err(Error::InvalidArgument(format!("batch {}x{} has {} tokens", self.batch, self.len, self.tokens.len())));
        }
        if self.len > cfg.max_len {
            return Err(Error::InvalidArgument(format!("sequence length {} exceeds max_len {}", self.len, cfg.max_len)));
        }
        if let Some(t) = self.tokens.iter().find(|&&t| t as usize >= cfg.vocab) {
            return Err(Error::InvalidArgument(format!("token id {t} outside vocabulary of {}", cfg.vocab)));
        }
        match &self.labels {
            Labels::Masked { positions, targets } => {
                if positions.len() != targets.len() || positions.iter().any(|&p| p >= n) {
                    return Err(Error::InvalidArgument("masked positions out of range".into()));
                }
            }
            Labels::Spans(spans) => {
                if spans.len() != self.batch || spans.iter().flatten().any(|&(s, e)| s > e || e >= self.len) {
                    return Err(Error::InvalidArgument("span labels out of range".into()));
                }
            }
            Labels::Class(c) if c.len() != self.batch => {
                return Err(Error::InvalidArgument(format!("{} class labels for batch of {}", c.len(), self.batch)));
            }
            _ => {}
        }
        Ok(())
    }
}

fn layer_norm<'t, T: Scalar>(x: Var<'t, T>, p: &Bound<'t, T>, prefix: &str) -> Var<'t, T> {
    x.layer_norm(p.get(&format!("{prefix}gain")), p.get(&format!("{prefix}bias")), LAYER_NORM_EPS)
}

fn ffn<'t, T: Scalar>(x: Var<'t, T>, p: &Bound<'t, T>, prefix: &str) -> Var<'t, T> {
    let h = x.matmul(p.get(&format!("{prefix}w1"))).add_bias(p.get(&format!("{prefix}b1"))).gelu();
    h.matmul(p.get(&format!("{prefix}w2"))).add_bias(p.get(&format!("{prefix}b2")))
}

/// Token representations `[batch, len, D]`.
pub fn encode<'t, T: Scalar>(cfg: &EncoderConfig, p: &Bound<'t, T>, batch: &BatchInput) -> Result<Var<'t, T>> {
    batch.validate(cfg)?;
    let (b, l, d) = (batch.batch, batch.len, cfg.dim);
    let attn = cfg.attention_at(l, batch.globals);
    attn.validate()?;

    let ids = Rc::new(batch.tokens.iter().map(|&t| Some(t as usize)).collect());
    let pos = Rc::new((0..b * l).map(|x| Some(x % l)).collect());
    let mut x = p.get("tok_emb").gather_rows(ids).add(p.get("pos_emb").gather_rows(pos)).reshape(&[b, l, d]);

    let ctx = AttnCtx::new(b, cfg.n_heads, l);
    let ctx = if batch.has_padding() { ctx.with_padding(Rc::new(batch.valid.clone())) } else { ctx };
    for i in 0..cfg.n_layers {
        let pre = layer_prefix(i);
        let ap = format!("{pre}attn.");
        if cfg.pre_ln {
            x = x.add(multi_head(&attn, layer_norm(x, p, &format!("{pre}ln1.")), p, &ap, &ctx));
            x = x.add(ffn(layer_norm(x, p, &format!("{pre}ln2.")), p, &format!("{pre}ffn.")));
        } else {
            x = layer_norm(x.add(multi_head(&attn, x, p, &ap, &ctx)), p, &format!("{pre}ln1."));
            x = layer_norm(x.add(ffn(x, p, &format!("{pre}ffn."))), p, &format!("{pre}ln2."));
        }
    }
    Ok(if cfg.pre_ln { layer_norm(x, p, "final_ln.") } else { x })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::Overlap;
    use crate::tensor::{finite_difference_check, Tape, Tensor};

    fn tiny(variant: Variant, layers: usize, len: usize) -> EncoderConfig {
        let mut cfg = EncoderConfig::new(layers, 8, 2, 16, len, variant);
        cfg.vocab = crate::vocab::SIZE;
        cfg
    }

    fn seqs(rng: &mut Rng, b: usize, l: usize, vocab: u32) -> Vec<Vec<u32>> {
        (0..b).map(|_| (0..l).map(|_| rng.below(vocab as usize) as u32).collect()).collect()
    }

    #[test]
    fn zero_layers_is_normalized_embedding() {
        let cfg = tiny(Variant::Exact, 0, 6);
        let model = Model::<f64>::init(cfg.clone(), Head::Retrieval, 3).unwrap();
        let batch = BatchInput::from_sequences(&[vec![1, 2, 3, 4, 5, 6]], None, 0).unwrap();
        let tape = Tape::new();
        let out = encode(&cfg, &model.params.bind(&tape), &batch).unwrap().value();
        let emb = model.params.get("tok_emb").unwrap();
        let pos = model.params.get("pos_emb").unwrap();
        let x = Tensor::from_fn(&[6, 8], |k| emb.at(&[batch.tokens[k / 8] as usize, k % 8]) + pos.at(&[k / 8, k % 8]));
        let want = x.layer_norm(&Tensor::ones(&[8]), &Tensor::zeros(&[8]), LAYER_NORM_EPS).unwrap();
        assert!(out.reshape(&[6, 8]).unwrap().max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn zeroed_blocks_preserve_identity_path() {
        let cfg = tiny(Variant::Blockwise { block: 4, overlap: Overlap::None }, 2, 8);
        let mut model = Model::<f64>::init(cfg.clone(), Head::Retrieval, 4).unwrap();
        let names: Vec<String> = model.params.names().iter().filter(|n| n.contains(".attn.") || n.contains(".ffn.")).cloned().collect();
        for n in names {
            let shape = model.params.get(&n).unwrap().shape().to_vec();
            model.params.set(&n, Tensor::zeros(&shape)).unwrap();
        }
        let batch = BatchInput::from_sequences(&seqs(&mut Rng::new(1), 2, 8, 12), None, 0).unwrap();
        let tape = Tape::new();
        let out = encode(&cfg, &model.params.bind(&tape), &batch).unwrap().value();
        let zero = tiny(Variant::Exact, 0, 8);
        let base = Model::<f64> { cfg: zero.clone(), head: Head::Retrieval, params: model.params.clone() };
        let tape2 = Tape::new();
        let want = encode(&zero, &base.params.bind(&tape2), &batch).unwrap().value();
        assert!(out.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn pad_ids_do_not_leak() {
        for variant in [Variant::Exact, Variant::Blockwise { block: 4, overlap: Overlap::Half }, Variant::SlidingWindow { w: 2 }] {
            let cfg = tiny(variant.clone(), 2, 8);
            let model = Model::<f64>::init(cfg.clone(), Head::Retrieval, 5).unwrap();
            let mut batch = BatchInput::from_sequences(&[vec![1, 2, 3, 4, 5], vec![6, 7, 8, 9, 10, 11, 1, 2]], Some(8), 1).unwrap();
            let run = |b: &BatchInput| {
                let tape = Tape::new();
                let v = encode(&cfg, &model.params.bind(&tape), b).unwrap().value();
                v.as_ref().clone()
            };
            let a = run(&batch);
            for i in 5..8 {
                batch.tokens[i] = 9;
            }
            let b = run(&batch);
            for (k, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
                if batch.valid[k / 8] {
                    assert!((x - y).abs() < 1e-12, "{variant:?} at {k}");
                }
            }
        }
    }

    #[test]
    fn rejects_overlong_and_bad_tokens() {
        let cfg = tiny(Variant::Exact, 1, 4);
        let model = Model::<f64>::init(cfg.clone(), Head::Retrieval, 6).unwrap();
        let tape = Tape::new();
        let p = model.params.bind(&tape);
        let long = BatchInput::from_sequences(&[vec![1; 5]], None, 0).unwrap();
        assert!(encode(&cfg, &p, &long).is_err());
        let bad = BatchInput::from_sequences(&[vec![1, 999]], None, 0).unwrap();
        assert!(encode(&cfg, &p, &bad).is_err());
    }

    #[test]
    fn presets_validate() {
        for name in PRESETS {
            let cfg = EncoderConfig::preset(name, Variant::Exact, 512).unwrap();
            assert_eq!(cfg.dim % cfg.n_heads, 0);
        }
        assert!(EncoderConfig::preset("huge", Variant::Exact, 512).is_err());
        let cfg = EncoderConfig::preset("lra2", Variant::Exact, 512).unwrap();
        assert_eq!((cfg.n_layers, cfg.dim, cfg.n_heads, cfg.ffn_dim), (2, 64, 2, 128));
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<EncoderConfig>(&json).unwrap(), cfg);
    }

    #[test]
    fn pooled_output_gradient_wrt_embeddings() {
        let cfg = tiny(Variant::Exact, 2, 16);
        let model = Model::<f64>::init(cfg.clone(), Head::Retrieval, 7).unwrap();
        let batch = BatchInput::from_sequences(&seqs(&mut Rng::new(2), 1, 16, 12), None, 0).unwrap();
        let pos = model.params.position("tok_emb").unwrap();
        let emb = model.params.tensor(pos).clone();
        let check = finite_difference_check(
            |e| {
                let tape = e.tape();
                let mut vars = model.params.bind(tape);
                vars.replace(pos, e);
                let out = encode(&cfg, &vars, &batch).unwrap();
                // layer-normed rows average to zero, so pool against a fixed readout
                let r = Tensor::from_fn(&[1, 16, 8], |k| ((k * 7919) % 13) as f64 / 13.0 - 0.5);
                out.mul(tape.constant(r)).mean()
            },
            &emb,
            1e-5,
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-4, "{}", check.max_rel_error);
    }
}
