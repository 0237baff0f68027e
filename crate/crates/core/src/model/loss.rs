use std::rc::Rc;

use super::{encode, BatchInput, EncoderConfig, Labels};
use crate::error::{Error, Result};
use crate::params::Bound;
use crate::tensor::{Scalar, Var, LAYER_NORM_EPS};

/// Mean negative log-likelihood of `targets` under row-wise softmax of
/// `logits: [N, C]`.
pub fn cross_entropy<'t, T: Scalar>(logits: Var<'t, T>, targets: &[usize]) -> Var<'t, T> {
    let c = logits.dim(logits.shape().len() - 1);
    assert_eq!(logits.value().len(), targets.len() * c, "one target per row");
    let idx: Vec<usize> = targets.iter().enumerate().map(|(i, &t)| i * c + t).collect();
    logits.log_softmax().pick(Rc::new(idx)).mean().neg()
}

fn rows_at<'t, T: Scalar>(hidden: Var<'t, T>, rows: impl Iterator<Item = usize>) -> Var<'t, T> {
    let sh = hidden.shape();
    let d = sh[sh.len() - 1];
    let n = hidden.value().len() / d;
    hidden.reshape(&[n, d]).gather_rows(Rc::new(rows.map(Some).collect()))
}

fn cls_rows<'t, T: Scalar>(hidden: Var<'t, T>) -> Var<'t, T> {
    let (b, l) = (hidden.dim(0), hidden.dim(1));
    rows_at(hidden, (0..b).map(|i| i * l))
}

/// Vocabulary logits `[M, V]` at flat positions of `hidden: [B, L, D]`,
/// decoded through the tied token embedding.
pub fn mlm_logits<'t, T: Scalar>(p: &Bound<'t, T>, hidden: Var<'t, T>, positions: &[usize]) -> Var<'t, T> {
    let h = rows_at(hidden, positions.iter().copied());
    let h = h.matmul(p.get("mlm.w")).add_bias(p.get("mlm.b")).gelu();
    let h = h.layer_norm(p.get("mlm.ln.gain"), p.get("mlm.ln.bias"), LAYER_NORM_EPS);
    h.matmul_nt(p.get("tok_emb")).add_bias(p.get("mlm.out_bias"))
}

/// Mean cross-entropy over the masked positions only.
pub fn mlm_loss<'t, T: Scalar>(cfg: &EncoderConfig, p: &Bound<'t, T>, batch: &BatchInput) -> Result<Var<'t, T>> {
    let Labels::Masked { positions, targets } = &batch.labels else {
        return Err(Error::InvalidArgument("masked-LM loss needs masked labels".into()));
    };
    if positions.is_empty() {
        return Err(Error::Empty("masked positions"));
    }
    let hidden = encode(cfg, p, batch)?;
    let targets: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    Ok(cross_entropy(mlm_logits(p, hidden, positions), &targets))
}

/// Two-layer tanh MLP on the first token of each sequence: `[B, C]`.
pub fn cls_logits<'t, T: Scalar>(p: &Bound<'t, T>, hidden: Var<'t, T>) -> Var<'t, T> {
    let h = cls_rows(hidden).matmul(p.get("cls.w1")).add_bias(p.get("cls.b1")).tanh();
    h.matmul(p.get("cls.w2")).add_bias(p.get("cls.b2"))
}

pub(crate) fn argmax<T: Scalar>(row: &[T]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, v)| if *v > row[best] { i } else { best })
}

/// Classification loss and the argmax prediction per sequence.
pub fn cls_loss<'t, T: Scalar>(
    cfg: &EncoderConfig,
    p: &Bound<'t, T>,
    batch: &BatchInput,
    n_classes: usize,
) -> Result<(Var<'t, T>, Vec<usize>)> {
    if n_classes < 2 {
        return Err(Error::Config(format!("classification needs at least 2 classes, got {n_classes}")));
    }
    let Labels::Class(labels) = &batch.labels else {
        return Err(Error::InvalidArgument("classification loss needs class labels".into()));
    };
    if let Some(c) = labels.iter().find(|&&c| c >= n_classes) {
        return Err(Error::InvalidArgument(format!("class {c} outside 0..{n_classes}")));
    }
    let logits = cls_logits(p, encode(cfg, p, batch)?);
    if logits.dim(1) != n_classes {
        return Err(Error::Config(format!("head has {} classes, expected {n_classes}", logits.dim(1))));
    }
    let lv = logits.value();
    let preds = (0..batch.batch).map(|i| argmax(lv.row(i))).collect();
    Ok((cross_entropy(logits, labels), preds))
}

/// Start and end logits `[B, L]` from a single linear layer.
pub fn span_logits<'t, T: Scalar>(p: &Bound<'t, T>, hidden: Var<'t, T>) -> (Var<'t, T>, Var<'t, T>) {
    let (b, l) = (hidden.dim(0), hidden.dim(1));
    let s = hidden.matmul(p.get("span.w")).add_bias(p.get("span.b"));
    (s.slice(2, 0, 1).reshape(&[b, l]), s.slice(2, 1, 2).reshape(&[b, l]))
}

/// `-log Σ_gold p_start(s) p_end(e)` averaged over sequences with at least
/// one gold span. `valid` excludes padding from both distributions.
pub fn span_nll<'t, T: Scalar>(
    start: Var<'t, T>,
    end: Var<'t, T>,
    valid: Option<&[bool]>,
    gold: &[Vec<(usize, usize)>],
) -> Result<Var<'t, T>> {
    let (b, l) = (start.dim(0), start.dim(1));
    if gold.len() != b {
        return Err(Error::InvalidArgument(format!("{} gold sets for batch of {b}", gold.len())));
    }
    let kept: Vec<usize> = (0..b).filter(|&i| !gold[i].is_empty()).collect();
    if kept.is_empty() {
        return Err(Error::Empty("gold spans"));
    }
    let g = gold.iter().map(Vec::len).max().unwrap_or(0);
    let (mut si, mut ei, mut ok) = (Vec::new(), Vec::new(), Vec::new());
    for (i, spans) in gold.iter().enumerate() {
        for k in 0..g {
            let (s, e) = spans.get(k).copied().unwrap_or((0, 0));
            if s > e || e >= l {
                return Err(Error::InvalidArgument(format!("span ({s}, {e}) outside length {l}")));
            }
            si.push(i * l + s);
            ei.push(i * l + e);
            ok.push(k < spans.len());
        }
    }
    let mask = valid.map(|v| Rc::new(v.to_vec()));
    let lse_s = start.logsumexp(mask.as_ref());
    let lse_e = end.logsumexp(mask.as_ref());
    let pairs = start.reshape(&[b * l]).pick(Rc::new(si)).add(end.reshape(&[b * l]).pick(Rc::new(ei)));
    let lse_g = pairs.reshape(&[b, g]).logsumexp(Some(&Rc::new(ok)));
    Ok(lse_s.add(lse_e).sub(lse_g).pick(Rc::new(kept)).mean())
}

pub fn span_loss<'t, T: Scalar>(cfg: &EncoderConfig, p: &Bound<'t, T>, batch: &BatchInput) -> Result<Var<'t, T>> {
    let Labels::Spans(gold) = &batch.labels else {
        return Err(Error::InvalidArgument("span loss needs span labels".into()));
    };
    let (s, e) = span_logits(p, encode(cfg, p, batch)?);
    span_nll(s, e, batch.has_padding().then_some(batch.valid.as_slice()), gold)
}

/// Cross-entropy of each query against all in-batch documents, the
/// positive being on the diagonal.
pub fn inbatch_nll<'t, T: Scalar>(scores: Var<'t, T>) -> Result<Var<'t, T>> {
    let b = scores.dim(0);
    if b < 2 || scores.dim(1) != b {
        return Err(Error::InvalidArgument(format!("in-batch retrieval needs a square score matrix with batch >= 2, got {:?}", scores.shape())));
    }
    Ok(cross_entropy(scores, &(0..b).collect::<Vec<_>>()))
}

/// Dot products of first-token vectors `[Bq, Bd]` from the shared encoder.
pub fn retrieval_scores<'t, T: Scalar>(
    cfg: &EncoderConfig,
    p: &Bound<'t, T>,
    queries: &BatchInput,
    docs: &BatchInput,
) -> Result<Var<'t, T>> {
    let q = cls_rows(encode(cfg, p, queries)?);
    let d = cls_rows(encode(cfg, p, docs)?);
    Ok(q.matmul_nt(d))
}

pub fn retrieval_loss<'t, T: Scalar>(
    cfg: &EncoderConfig,
    p: &Bound<'t, T>,
    queries: &BatchInput,
    docs: &BatchInput,
) -> Result<Var<'t, T>> {
    if queries.batch < 2 || queries.batch != docs.batch {
        return Err(Error::InvalidArgument(format!("retrieval needs matching batches of at least 2 (got {} and {})", queries.batch, docs.batch)));
    }
    inbatch_nll(retrieval_scores(cfg, p, queries, docs)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::Variant;
    use crate::model::{Head, Model};
    use crate::params::check_param_gradients;
    use crate::tensor::{seeded_sample, Distribution, Rng, Tape, Tensor};

    fn lse(xs: &[f64]) -> f64 {
        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    }

    #[test]
    fn cross_entropy_cases() {
        let tape = Tape::<f64>::new();
        let uniform = tape.constant(Tensor::zeros(&[3, 260]));
        assert!((cross_entropy(uniform, &[0, 5, 259]).value().item() - 260f64.ln()).abs() < 1e-12);
        let two = tape.constant(Tensor::zeros(&[1, 2]));
        assert!((cross_entropy(two, &[1]).value().item() - 2f64.ln()).abs() < 1e-14);
        let sharp = tape.constant(Tensor::from_vec(&[1, 3], vec![-50.0, 50.0, -50.0]));
        assert!(cross_entropy(sharp, &[1]).value().item() < 1e-40);

        let x: Tensor<f64> = seeded_sample(&mut Rng::new(1), Distribution::Gaussian, &[4, 7]).unwrap();
        let t = [3, 0, 6, 2];
        let want = (0..4).map(|i| lse(x.row(i)) - x.at(&[i, t[i]])).sum::<f64>() / 4.0;
        assert!((cross_entropy(tape.constant(x), &t).value().item() - want).abs() < 1e-12);
    }

    #[test]
    fn span_marginal_cases() {
        let tape = Tape::<f64>::new();
        let zeros = || tape.constant(Tensor::zeros(&[1, 4]));
        let loss = span_nll(zeros(), zeros(), None, &[vec![(0, 1), (2, 3)]]).unwrap();
        assert!((loss.value().item() + (1.0f64 / 8.0).ln()).abs() < 1e-12);

        let sat = |k: usize| tape.constant(Tensor::from_fn(&[1, 4], |i| if i == k { 60.0 } else { -60.0 }));
        assert!(span_nll(sat(1), sat(2), None, &[vec![(1, 2)]]).unwrap().value().item() < 1e-40);
        assert!(span_nll(zeros(), zeros(), None, &[vec![]]).is_err());

        let mut rng = Rng::new(2);
        let (l, b) = (9, 2);
        let s: Tensor<f64> = seeded_sample(&mut rng, Distribution::Gaussian, &[b, l]).unwrap();
        let e: Tensor<f64> = seeded_sample(&mut rng, Distribution::Gaussian, &[b, l]).unwrap();
        let gold = vec![vec![(1, 3), (4, 4), (2, 8)], vec![(0, 5)]];
        let got = span_nll(tape.constant(s.clone()), tape.constant(e.clone()), None, &gold).unwrap().value().item();
        let mut want = 0.0;
        for i in 0..b {
            let (zs, ze) = (lse(s.row(i)), lse(e.row(i)));
            let p: f64 = gold[i].iter().map(|&(a, c)| (s.at(&[i, a]) - zs).exp() * (e.at(&[i, c]) - ze).exp()).sum();
            want -= p.ln();
        }
        assert!((got - want / b as f64).abs() < 1e-12);
    }

    #[test]
    fn span_padding_is_excluded() {
        let tape = Tape::<f64>::new();
        let x = || tape.constant(Tensor::from_vec(&[1, 4], vec![0.0, 0.0, 5.0, 9.0]));
        let loss = span_nll(x(), x(), Some(&[true, true, false, false]), &[vec![(0, 1)]]).unwrap();
        assert!((loss.value().item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn inbatch_cases() {
        let tape = Tape::<f64>::new();
        let sym = tape.constant(Tensor::from_vec(&[2, 2], vec![1.0, 1.0, 1.0, 1.0]));
        assert!((inbatch_nll(sym).unwrap().value().item() - 2f64.ln()).abs() < 1e-14);
        let diag = tape.constant(Tensor::from_fn(&[3, 3], |k| if k % 4 == 0 { 100.0 } else { 0.0 }));
        assert!(inbatch_nll(diag).unwrap().value().item() < 1e-40);
        assert!(inbatch_nll(tape.constant(Tensor::zeros(&[1, 1]))).is_err());

        let s: Tensor<f64> = seeded_sample(&mut Rng::new(3), Distribution::Gaussian, &[4, 4]).unwrap();
        let want = (0..4).map(|i| lse(s.row(i)) - s.at(&[i, i])).sum::<f64>() / 4.0;
        assert!((inbatch_nll(tape.constant(s)).unwrap().value().item() - want).abs() < 1e-12);
    }

    fn small(head: Head) -> Model<f64> {
        let mut cfg = EncoderConfig::new(2, 8, 2, 16, 8, Variant::Exact);
        cfg.vocab = crate::vocab::SIZE;
        Model::init(cfg, head, 11).unwrap()
    }

    #[test]
    fn cls_head_matches_direct_formula() {
        let model = small(Head::Cls { n_classes: 3 });
        let batch = BatchInput::from_sequences(&[vec![1, 2, 3, 4], vec![5, 6, 7]], None, 1).unwrap().with_labels(Labels::Class(vec![2, 0]));
        let tape = Tape::new();
        let p = model.params.bind(&tape);
        let (loss, preds) = cls_loss(&model.cfg, &p, &batch, 3).unwrap();
        let h = encode(&model.cfg, &p, &batch).unwrap().value();
        let get = |n: &str| model.params.get(n).unwrap().clone();
        let (w1, b1, w2, b2) = (get("cls.w1"), get("cls.b1"), get("cls.w2"), get("cls.b2"));
        let mut want = 0.0;
        for (i, &y) in [2usize, 0].iter().enumerate() {
            let z: Vec<f64> = (0..8).map(|c| ((0..8).map(|r| h.at(&[i, 0, r]) * w1.at(&[r, c])).sum::<f64>() + b1.data()[c]).tanh()).collect();
            let o: Vec<f64> = (0..3).map(|c| (0..8).map(|r| z[r] * w2.at(&[r, c])).sum::<f64>() + b2.data()[c]).collect();
            want += lse(&o) - o[y];
            assert_eq!(preds[i], argmax(&o));
        }
        assert!((loss.value().item() - want / 2.0).abs() < 1e-12);
        assert!(cls_loss(&model.cfg, &p, &batch, 1).is_err());
    }

    #[test]
    fn mlm_requires_masked_positions() {
        let model = small(Head::Mlm);
        let tape = Tape::new();
        let p = model.params.bind(&tape);
        let batch = BatchInput::from_sequences(&[vec![1, 2, 3]], None, 0).unwrap();
        let empty = batch.clone().with_labels(Labels::Masked { positions: vec![], targets: vec![] });
        assert!(matches!(mlm_loss(&model.cfg, &p, &empty), Err(Error::Empty(_))));
        let ok = batch.with_labels(Labels::Masked { positions: vec![1], targets: vec![4] });
        assert!(mlm_loss(&model.cfg, &p, &ok).unwrap().value().item() > 0.0);
    }

    #[test]
    fn losses_pass_gradient_checks() {
        let seqs = vec![vec![1, 2, 3, 4, 5, 6], vec![7, 8, 9, 1]];
        let batch = BatchInput::from_sequences(&seqs, Some(8), 1).unwrap();
        let cases: Vec<(Head, BatchInput)> = vec![
            (Head::Mlm, batch.clone().with_labels(Labels::Masked { positions: vec![2, 9], targets: vec![3, 8] })),
            (Head::Cls { n_classes: 3 }, batch.clone().with_labels(Labels::Class(vec![1, 2]))),
            (Head::Span, batch.clone().with_labels(Labels::Spans(vec![vec![(1, 2), (3, 5)], vec![(0, 1)]]))),
            (Head::Retrieval, batch.clone()),
        ];
        for (head, b) in cases {
            let model = small(head);
            let checks = check_param_gradients(
                &model.params,
                |p| match head {
                    Head::Mlm => mlm_loss(&model.cfg, p, &b).unwrap(),
                    Head::Cls { n_classes } => cls_loss(&model.cfg, p, &b, n_classes).unwrap().0,
                    Head::Span => span_loss(&model.cfg, p, &b).unwrap(),
                    Head::Retrieval => retrieval_loss(&model.cfg, p, &b, &b).unwrap(),
                },
                1e-5,
            )
            .unwrap();
            for (name, c) in checks {
                assert!(c.max_rel_error < 1e-4, "{head:?} {name}: {}", c.max_rel_error);
            }
        }
    }
}
