use super::{Bound, CheckOptions, CheckResult};
use crate::attention::{attend, attention_specs, AttentionConfig, AttnCtx, AttnVars, FeatureKernel, Overlap, Variant};
use crate::error::Result;
use crate::model::{cls_loss, mlm_loss, retrieval_loss, span_loss, BatchInput, EncoderConfig, Head, Labels, Model};
use crate::params::{check_param_gradients, ParamStore};
use crate::tensor::{seeded_sample, Distribution, GradCheck, Rng};

pub const GRAD_TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;
const LEN: usize = 16;
const VOCAB: usize = 16;

/// Small settings of every variant that fit `L = 16`.
pub fn small_variants() -> Vec<Variant> {
    vec![
        Variant::Exact,
        Variant::SlidingWindow { w: 2 },
        Variant::Blockwise { block: 4, overlap: Overlap::Half },
        Variant::Blockwise { block: 4, overlap: Overlap::None },
        Variant::Lsh { n_hash: 2, chunk: 4, n_buckets: 4 },
        Variant::Sinkhorn { block: 4, iters: 4, temperature: 0.75, hard: false },
        Variant::Linformer { ratio: 2 },
        Variant::Nystrom { landmarks: 4, pinv_iters: 3, conv_kernel: 3 },
        Variant::Performer { features: 8, kernel: FeatureKernel::Relu },
        Variant::Performer { features: 8, kernel: FeatureKernel::SoftmaxApprox },
        Variant::LongShort { block: 4, landmarks: 2 },
    ]
}

fn label(v: &Variant) -> String {
    match v {
        Variant::Blockwise { overlap, .. } => format!("blockwise_{}", if *overlap == Overlap::Half { "half" } else { "none" }),
        Variant::Performer { kernel: FeatureKernel::SoftmaxApprox, .. } => "performer_softmax".into(),
        v => v.tag().into(),
    }
}

fn worst(checks: Vec<(String, GradCheck)>) -> f64 {
    checks.iter().map(|(_, c)| c.max_rel_error).fold(0.0, f64::max)
}

/// Gradient of a fixed random readout of one multi-head attention call with
/// one global token, with respect to queries, keys, values and the
/// variant's trainable tensors.
fn attention_check(variant: &Variant, rng: &mut Rng) -> Result<f64> {
    let (h, d) = (2, 4);
    let cfg = AttentionConfig::new(variant.clone(), LEN, d).heads(h).with_globals(1);
    let mut store = ParamStore::<f64>::init(&attention_specs(&cfg, LEN, ""), rng)?;
    for name in ["q", "k", "v"] {
        store.insert(name, seeded_sample(rng, Distribution::Uniform { low: -1.0, high: 1.0 }, &[h, LEN, d])?, true)?;
    }
    let readout = seeded_sample::<f64>(rng, Distribution::Gaussian, &[h, LEN, d])?;
    let shared = matches!(variant, Variant::Lsh { .. });
    let checks = check_param_gradients(
        &store,
        |b| {
            let tape = b.get("q").tape();
            let k = if shared { b.get("q") } else { b.get("k") };
            let out = attend(&cfg, b.get("q"), k, b.get("v"), &AttnCtx::new(1, h, LEN), &AttnVars::from_bound(b, ""));
            out.mul(tape.constant(readout.clone())).sum()
        },
        EPS,
    )?;
    Ok(worst(checks))
}

fn batch(rng: &mut Rng, globals: usize) -> Result<BatchInput> {
    let seqs: Vec<Vec<u32>> = [LEN, LEN - 5].iter().map(|&n| (0..n).map(|_| rng.below(VOCAB) as u32).collect()).collect();
    BatchInput::from_sequences(&seqs, Some(LEN), globals)
}

/// Gradient of each task loss with respect to every trainable parameter of
/// a two-layer encoder using `variant`, on a padded batch of two.
fn loss_checks(variant: &Variant, rng: &mut Rng) -> Result<Vec<(&'static str, f64)>> {
    let enc = EncoderConfig::new(2, 8, 2, 16, LEN, variant.clone());
    let b = batch(rng, 1)?;
    let docs = batch(rng, 1)?;
    let heads: [(&str, Head, Labels); 4] = [
        ("mlm", Head::Mlm, Labels::Masked { positions: vec![2, 7, LEN + 3], targets: vec![1, 5, 9] }),
        ("cls", Head::Cls { n_classes: 3 }, Labels::Class(vec![2, 0])),
        ("span", Head::Span, Labels::Spans(vec![vec![(1, 2), (4, 6)], vec![(3, 3)]])),
        ("retrieval", Head::Retrieval, Labels::None),
    ];
    let mut out = Vec::new();
    for (name, head, labels) in heads {
        let model = Model::<f64>::init(enc.clone(), head, rng.below(1 << 30) as u64)?;
        let input = b.clone().with_labels(labels);
        let cfg = &model.cfg;
        let checks = check_param_gradients(
            &model.params,
            |p| {
                match head {
                    Head::Mlm => mlm_loss(cfg, p, &input),
                    Head::Cls { n_classes } => cls_loss(cfg, p, &input, n_classes).map(|x| x.0),
                    Head::Span => span_loss(cfg, p, &input),
                    Head::Retrieval => retrieval_loss(cfg, p, &input, &docs),
                }
                .expect("valid batch")
            },
            EPS,
        )?;
        out.push((name, worst(checks)));
    }
    Ok(out)
}

/// Finite-difference checks in double precision at `L = 16`: every
/// attention variant on its own, and every loss on an encoder built from
/// each variant. The error is the largest relative error over parameters.
pub fn gradient_suite(opts: &CheckOptions) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::new(opts.seed ^ 0x96ad);
    let mut out = Vec::new();
    for variant in small_variants().iter().filter(|v| opts.covers(v.tag())) {
        let name = label(variant);
        out.push(CheckResult::new(format!("{name} attention"), attention_check(variant, &mut rng)?, Bound::AtMost(GRAD_TOL)));
        for (loss, err) in loss_checks(variant, &mut rng)? {
            out.push(CheckResult::new(format!("{name} {loss} loss"), err, Bound::AtMost(GRAD_TOL)));
        }
    }
    Ok(out)
}

