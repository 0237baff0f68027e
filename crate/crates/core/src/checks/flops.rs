use super::{Bound, CheckOptions, CheckResult};
use crate::attention::{AttentionConfig, FeatureKernel, Overlap, Variant};
use crate::cost::{
    count_attention_flops, count_model_flops_masked, count_model_flops, instrumented_attention_flops,
    instrumented_model_flops, mlm_positions,
};
use crate::error::Result;
use crate::model::{EncoderConfig, Head};

const COUNTER_LEN: usize = 64;

/// Variants the counter comparison runs on, sized for `L = 64`.
fn counter_variants() -> Vec<Variant> {
    vec![
        Variant::Exact,
        Variant::SlidingWindow { w: 5 },
        Variant::Blockwise { block: 16, overlap: Overlap::None },
        Variant::Blockwise { block: 16, overlap: Overlap::Half },
        Variant::Lsh { n_hash: 3, chunk: 8, n_buckets: 6 },
        Variant::Sinkhorn { block: 16, iters: 4, temperature: 0.75, hard: false },
        Variant::Linformer { ratio: 4 },
        Variant::Nystrom { landmarks: 16, pinv_iters: 3, conv_kernel: 5 },
        Variant::Performer { features: 12, kernel: FeatureKernel::Relu },
        Variant::Performer { features: 12, kernel: FeatureKernel::SoftmaxApprox },
        Variant::LongShort { block: 16, landmarks: 4 },
    ]
}

/// Reference ordering of the LRA models' total cost, cheapest first.
pub const LRA_COST_ORDER: [&str; 8] =
    ["blockwise", "sliding_window", "long_short", "performer", "nystrom", "linformer", "lsh", "sinkhorn"];
pub const LRA_ORDER_LEN: usize = 4096;

pub fn lra_total_flops(tag: &str) -> Result<u64> {
    let enc = EncoderConfig::preset("lra2", Variant::lra_defaults(tag)?, LRA_ORDER_LEN)?;
    Ok(count_model_flops(&enc, &Head::Cls { n_classes: 10 }, LRA_ORDER_LEN, 1).total)
}

/// Number of adjacent pairs in [`LRA_COST_ORDER`] whose totals are out of
/// order; Linformer may tie with LSH.
pub fn lra_order_violations() -> Result<usize> {
    let t = LRA_COST_ORDER.iter().map(|tag| lra_total_flops(tag)).collect::<Result<Vec<_>>>()?;
    Ok((0..t.len() - 1)
        .filter(|&i| if LRA_COST_ORDER[i] == "linformer" { t[i] > t[i + 1] } else { t[i] >= t[i + 1] })
        .count())
}

fn doubling(a: &AttentionConfig, b: &AttentionConfig) -> f64 {
    count_attention_flops(b) as f64 / count_attention_flops(a) as f64
}

/// Analytic counts against the instrumented counter, the overlap halving,
/// length scaling under doubling, and the ordering of the LRA presets.
pub fn flop_suite(opts: &CheckOptions) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for v in counter_variants().into_iter().filter(|v| opts.covers(v.tag())) {
        for g in [0, 1] {
            let cfg = AttentionConfig::new(v.clone(), COUNTER_LEN, 8).heads(2).with_globals(g);
            let diff = crate::cost::attention_flops_for_rows(&cfg, 4).abs_diff(instrumented_attention_flops(&cfg, 2)?);
            out.push(CheckResult::new(format!("{v:?} g={g}: attention formula - counter"), diff as f64, Bound::Equals(0.0)));
        }
        let enc = EncoderConfig::new(2, 16, 2, 32, COUNTER_LEN, v.clone());
        for head in [Head::Cls { n_classes: 10 }, Head::Mlm] {
            let masked = mlm_positions(COUNTER_LEN);
            let analytic = count_model_flops_masked(&enc, &head, COUNTER_LEN, 1, masked).total;
            let diff = analytic.abs_diff(instrumented_model_flops(&enc, &head, COUNTER_LEN, 1, masked)?);
            out.push(CheckResult::new(format!("{v:?} {head:?}: model formula - counter"), diff as f64, Bound::Equals(0.0)));
        }
    }

    if opts.covers("blockwise") {
        for (block, len) in [(16, 64), (64, 4096), (128, 4096)] {
            let mk = |overlap| AttentionConfig::new(Variant::Blockwise { block, overlap }, len, 64);
            let r = count_attention_flops(&mk(Overlap::None)) as f64 / count_attention_flops(&mk(Overlap::Half)) as f64;
            out.push(CheckResult::new(format!("blockwise B={block} L={len}: none/half"), r, Bound::Equals(0.5)));
        }
    }

    let linear = Bound::Within { low: 1.9, high: 2.1 };
    if opts.covers("exact") {
        let cfg = AttentionConfig::new(Variant::Exact, 1024, 64);
        out.push(CheckResult::new("exact: flops(2L)/flops(L) at L=1024", doubling(&cfg, &cfg.at_len(2048)), Bound::Within { low: 3.9, high: 4.1 }));
    }
    for tag in ["sliding_window", "blockwise", "lsh", "sinkhorn", "nystrom", "performer", "long_short"] {
        if !opts.covers(tag) {
            continue;
        }
        let v = Variant::defaults(tag)?;
        let l = 8 * v.scale_param();
        let cfg = AttentionConfig::new(v, l, 64);
        out.push(CheckResult::new(format!("{tag}: flops(2L)/flops(L) at L={l}"), doubling(&cfg, &cfg.at_len(2 * l)), linear));
    }
    if opts.covers("linformer") {
        // the projected length k = L/ratio is held fixed while L doubles
        let Variant::Linformer { ratio } = Variant::defaults("linformer")? else { unreachable!() };
        let l = 8 * 256;
        let a = AttentionConfig::new(Variant::Linformer { ratio }, l, 64);
        let b = AttentionConfig::new(Variant::Linformer { ratio: 2 * ratio }, 2 * l, 64);
        out.push(CheckResult::new(format!("linformer: flops(2L)/flops(L) at L={l}, fixed k"), doubling(&a, &b), linear));
    }

    if opts.variant.is_none() {
        out.push(CheckResult::new(
            format!("LRA presets at L={LRA_ORDER_LEN}: total-flop ordering violations"),
            lra_order_violations()? as f64,
            Bound::Equals(0.0),
        ));
    }
    Ok(out)
}
