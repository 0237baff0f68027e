//! Fixtures shared by the criterion benches.

use longattn_core::attention::{attention_specs, AttentionConfig, Variant, VARIANT_TAGS};
use longattn_core::model::{loss, BatchInput, EncoderConfig, Head, Labels, Model};
use longattn_core::tensor::Rng;
use longattn_core::train::{AdamConfig, Trainer};
use longattn_core::{ParamStore, Result, Tensor};

/// One single-head attention call: config, inputs and variant parameters.
pub struct AttentionCase {
    pub cfg: AttentionConfig,
    pub q: Tensor<f32>,
    pub k: Tensor<f32>,
    pub v: Tensor<f32>,
    pub params: ParamStore<f32>,
}

impl AttentionCase {
    pub fn new(variant: Variant, len: usize, head_dim: usize, globals: usize, seed: u64) -> Result<Self> {
        let cfg = AttentionConfig::new(variant, len, head_dim).with_globals(globals);
        cfg.validate()?;
        let mut rng = Rng::new(seed);
        let params = ParamStore::init(&attention_specs(&cfg, len, ""), &mut rng)?;
        let mut gauss = |_| rng.normal() as f32;
        let q = Tensor::from_fn(&[len, head_dim], &mut gauss);
        let k = Tensor::from_fn(&[len, head_dim], &mut gauss);
        let v = Tensor::from_fn(&[len, head_dim], &mut gauss);
        Ok(Self { cfg, q, k, v, params })
    }

    pub fn run(&self) -> Result<Tensor<f32>> {
        longattn_core::attention::attend_tensors(&self.cfg, &self.q, &self.k, &self.v, &self.params)
    }
}

/// Every variant with its default settings.
pub fn default_variants() -> Vec<Variant> {
    VARIANT_TAGS.iter().map(|t| Variant::defaults(t).expect("known tag")).collect()
}

/// A classification training step on random tokens.
pub struct TrainCase {
    pub trainer: Trainer<f32>,
    pub input: BatchInput,
}

impl TrainCase {
    pub fn new(enc: EncoderConfig, len: usize, batch: usize) -> Result<Self> {
        let model = Model::init(enc, Head::Cls { n_classes: 2 }, 0)?;
        let mut rng = Rng::new(1);
        let seqs: Vec<Vec<u32>> = (0..batch).map(|_| (0..len).map(|_| rng.below(256) as u32).collect()).collect();
        let input = BatchInput::from_sequences(&seqs, None, 1)?.with_labels(Labels::Class((0..batch).map(|i| i % 2).collect()));
        Ok(Self { trainer: Trainer::new(model, AdamConfig::default(), Some(1.0)), input })
    }

    pub fn step(&mut self) -> Result<f64> {
        let input = &self.input;
        self.trainer.step(1e-4, |m, p| Ok(loss::cls_loss(&m.cfg, p, input, 2)?.0))
    }
}
