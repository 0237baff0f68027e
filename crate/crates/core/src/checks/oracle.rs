use super::{Bound, CheckOptions, CheckResult};
use crate::attention::{build_mask, exact_attention, masked_attention, AttentionConfig, Overlap, Variant};
use crate::error::Result;
use crate::tensor::{seeded_sample, Distribution, Rng, Tensor};

pub const ORACLE_TOL: f64 = 1e-5;
const MAX_LEN: usize = 128;

/// One random geometry for pattern `kind` (0 sliding, 1 blockwise half,
/// 2 blockwise none).
fn random_case(rng: &mut Rng, kind: usize, g: usize) -> AttentionConfig {
    let d = rng.range(2, 17);
    let variant = match kind {
        0 => {
            let l = rng.range(2, MAX_LEN + 1);
            return AttentionConfig::new(Variant::SlidingWindow { w: rng.range(1, l) }, l, d).with_globals(g);
        }
        1 => Variant::Blockwise { block: 2 * rng.range(1, 17), overlap: Overlap::Half },
        _ => Variant::Blockwise { block: rng.range(1, 33), overlap: Overlap::None },
    };
    let b = variant.scale_param();
    let l = b * rng.range(1, MAX_LEN / b + 1);
    AttentionConfig::new(variant, l, d).with_globals(g)
}

/// Largest deviation of the single-precision sliding/blockwise kernels from
/// double-precision dense attention under the same mask, over `cases`
/// random configurations with `L <= 128`.
pub fn oracle_suite(opts: &CheckOptions) -> Result<Vec<CheckResult>> {
    let mut worst = [[0.0f64; 2]; 3];
    let mut rng = Rng::new(opts.seed ^ 0x0ac1e);
    let kinds: Vec<usize> = [("sliding_window", 0), ("blockwise", 1), ("blockwise", 2)]
        .iter()
        .filter(|(t, _)| opts.covers(t))
        .map(|&(_, k)| k)
        .collect();
    if kinds.is_empty() {
        return Ok(Vec::new());
    }
    let combos: Vec<(usize, usize)> = kinds.iter().flat_map(|&k| [(k, 0), (k, 1)]).collect();
    for case in 0..opts.oracle_cases {
        let (kind, g) = combos[case % combos.len()];
        let cfg = random_case(&mut rng, kind, g);
        let (l, d) = (cfg.len, cfg.head_dim);
        let mut mk = || seeded_sample::<f64>(&mut rng, Distribution::Uniform { low: -1.0, high: 1.0 }, &[l, d]);
        let (q, k, v) = (mk()?, mk()?, mk()?);
        let want = exact_attention(&q, &k, &v, &build_mask(&cfg)?, false)?.values;
        let got: Tensor<f32> = masked_attention(&q.cast(), &k.cast(), &v.cast(), &cfg)?.values;
        let err = got.cast::<f64>().max_abs_diff(&want);
        worst[kind][g] = worst[kind][g].max(err);
    }
    let names = ["sliding_window", "blockwise_half", "blockwise_none"];
    Ok(combos
        .iter()
        .map(|&(k, g)| CheckResult::new(format!("{} g={g} vs dense oracle", names[k]), worst[k][g], Bound::AtMost(ORACLE_TOL)))
        .collect())
}
