use crate::attention::{attend, attention_specs, AttentionConfig, AttnCtx, AttnVars, Variant};
use crate::error::Result;
use crate::model::{encode, loss, BatchInput, EncoderConfig, Head, Labels, Model};
use crate::params::ParamStore;
use crate::tensor::{counter, seeded_sample, Distribution, Rng, Tape};

/// Runs the attention kernel once on random `[batch * heads, L, d]` inputs
/// and returns the flops the counter saw.
pub fn instrumented_attention_flops(cfg: &AttentionConfig, batch: usize) -> Result<u64> {
    cfg.validate()?;
    let mut rng = Rng::new(5);
    let (h, l, d) = (cfg.n_heads, cfg.len, cfg.head_dim);
    let store = ParamStore::<f64>::init(&attention_specs(cfg, l, ""), &mut rng)?;
    let tape = Tape::new();
    let b = store.bind(&tape);
    let vars = AttnVars::from_bound(&b, "");
    let mut mk = || seeded_sample(&mut rng, Distribution::Gaussian, &[batch * h, l, d]).map(|t| tape.constant(t));
    let (q, k, v) = (mk()?, mk()?, mk()?);
    let k = if matches!(cfg.variant, Variant::Lsh { .. }) { q } else { k };
    let (_, n) = counter::measure(|| attend(cfg, q, k, v, &AttnCtx::new(batch, h, l), &vars));
    tape.check()?;
    Ok(n)
}

/// Forward flops of the encoder plus the head's logits on one unpadded
/// sequence, as seen by the counter. The masked-LM head scores positions
/// `1..=masked`.
pub fn instrumented_model_flops(enc: &EncoderConfig, head: &Head, len: usize, globals: usize, masked: usize) -> Result<u64> {
    let model = Model::<f64>::init(enc.clone(), head.clone(), 3)?;
    let seqs: Vec<Vec<u32>> = vec![(0..len).map(|i| (i * 7 % 250) as u32).collect()];
    let positions: Vec<usize> = (1..=masked).collect();
    let labels = match head {
        Head::Mlm => Labels::Masked { positions: positions.clone(), targets: vec![5; masked] },
        Head::Cls { .. } => Labels::Class(vec![0]),
        _ => Labels::None,
    };
    let batch = BatchInput::from_sequences(&seqs, None, globals)?.with_labels(labels);
    let tape = Tape::new();
    let p = model.params.bind(&tape);
    let (h, n) = counter::measure(|| {
        let h = encode(enc, &p, &batch)?;
        match head {
            Head::Mlm => {
                loss::mlm_logits(&p, h, &positions);
            }
            Head::Cls { .. } => {
                loss::cls_logits(&p, h);
            }
            Head::Span => {
                loss::span_logits(&p, h);
            }
            Head::Retrieval => {}
        }
        Ok::<_, crate::error::Error>(())
    });
    h?;
    Ok(n)
}
