use serde::{Deserialize, Serialize};

use super::metrics::{accuracy, decode_span, mean_reciprocal_rank, rank_of, span_scores, MetricSet};
use super::optim::{clip_global_norm, Adam, AdamConfig};
use crate::error::{Error, Result};
use crate::model::{encode, loss, BatchInput, Labels, Model};
use crate::params::Bound;
use crate::tasks::{apply_mlm_masking, class_batch, LongDocExample, TaskExample, Target};
use crate::tensor::{Rng, Scalar, Tape, Var};
use crate::vocab;

/// Sequences per forward pass during evaluation.
pub const EVAL_BATCH: usize = 32;
/// Seed of the fixed dev-set masking, so evaluation is a pure function.
pub const EVAL_MASK_SEED: u64 = 0x5eed;

fn default_clip() -> Option<f64> {
    Some(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Fraction of the updates spent warming up linearly from zero.
    pub warmup: f64,
    pub updates: usize,
    /// Sequences per update.
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default = "default_clip")]
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Training loss is averaged and logged every this many updates.
    pub log_every: usize,
    /// Dev metric cadence; 0 evaluates only at the start and the end.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            warmup: 0.1,
            updates: 20_000,
            batch_size: 32,
            seed: 42,
            clip_norm: default_clip(),
            adam: AdamConfig::default(),
            log_every: 100,
            eval_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and non-negative, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.warmup) {
            return Err(Error::Config(format!("warmup fraction must lie in [0, 1], got {}", self.warmup)));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config("batch_size and log_every must be positive".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip norm must be positive, got {c}")));
            }
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup * self.updates as f64).round() as usize
    }

    /// Learning rate of update `step` (1-based): linear warmup to the base
    /// rate, then linear decay reaching zero at the final update.
    pub fn lr_at(&self, step: usize) -> f64 {
        let (w, n) = (self.warmup_steps(), self.updates);
        if step == 0 || step > n {
            return 0.0;
        }
        if step <= w {
            self.lr * step as f64 / w as f64
        } else {
            self.lr * (n - step) as f64 / (n - w) as f64
        }
    }
}

/// Span supervision for one document.
#[derive(Clone, Debug, PartialEq)]
pub struct SpanExample {
    pub tokens: Vec<u32>,
    /// Inclusive gold spans inside `tokens`.
    pub spans: Vec<(usize, usize)>,
    /// First position that may be predicted (after the question prefix).
    pub context_start: usize,
}

impl From<&LongDocExample> for SpanExample {
    fn from(d: &LongDocExample) -> Self {
        let spans = match &d.example.target {
            Target::Spans(s) => s.clone(),
            _ => Vec::new(),
        };
        Self { tokens: d.example.tokens.clone(), spans, context_start: d.prefix_len }
    }
}

/// A query and its relevant document.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalPair {
    pub query: Vec<u32>,
    pub doc: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TaskData {
    Classification { train: Vec<TaskExample>, dev: Vec<TaskExample>, n_classes: usize },
    Mlm { train: Vec<Vec<u32>>, dev: Vec<Vec<u32>>, mask_rate: f64 },
    Span { train: Vec<SpanExample>, dev: Vec<SpanExample> },
    Retrieval { train: Vec<RetrievalPair>, dev: Vec<RetrievalPair> },
}

/// Data plus the sequence geometry every batch is padded to.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub name: String,
    pub data: TaskData,
    pub len: usize,
    pub globals: usize,
}

impl Task {
    fn train_len(&self) -> usize {
        match &self.data {
            TaskData::Classification { train, .. } => train.len(),
            TaskData::Mlm { train, .. } => train.len(),
            TaskData::Span { train, .. } => train.len(),
            TaskData::Retrieval { train, .. } => train.len(),
        }
    }

    fn dev_len(&self) -> usize {
        match &self.data {
            TaskData::Classification { dev, .. } => dev.len(),
            TaskData::Mlm { dev, .. } => dev.len(),
            TaskData::Span { dev, .. } => dev.len(),
            TaskData::Retrieval { dev, .. } => dev.len(),
        }
    }
}

/// One `(step, value)` point of a logged series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug)]
pub struct RunOutput<T: Scalar> {
    pub model: Model<T>,
    pub history: Vec<CurvePoint>,
    pub metrics: MetricSet,
    pub steps: usize,
}

/// Shuffled passes over the training indices.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl Sampler {
    fn new(n: usize, rng: Rng) -> Self {
        let mut s = Self { order: (0..n).collect(), pos: n, rng };
        s.refill();
        s
    }

    fn refill(&mut self) {
        self.rng.shuffle(&mut self.order);
        self.pos = 0;
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        (0..k)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.refill();
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

fn pad(seqs: &[Vec<u32>], task: &Task) -> Result<BatchInput> {
    BatchInput::from_sequences(seqs, Some(task.len), task.globals)
}

/// Training loss of one sampled batch.
fn batch_loss<'t, T: Scalar>(model: &Model<T>, p: &Bound<'t, T>, task: &Task, idx: &[usize], rng: &mut Rng) -> Result<Var<'t, T>> {
    let cfg = &model.cfg;
    match &task.data {
        TaskData::Classification { train, n_classes, .. } => {
            let ex: Vec<&TaskExample> = idx.iter().map(|&i| &train[i]).collect();
            let batch = class_batch(&ex, task.len, task.globals)?;
            Ok(loss::cls_loss(cfg, p, &batch, *n_classes)?.0)
        }
        TaskData::Mlm { train, mask_rate, .. } => {
            let seqs: Vec<Vec<u32>> = idx.iter().map(|&i| train[i].clone()).collect();
            let batch = pad(&seqs, task)?;
            for _ in 0..100 {
                let (masked, counts) = apply_mlm_masking(rng, &batch, *mask_rate)?;
                if counts.selected() > 0 {
                    return loss::mlm_loss(cfg, p, &masked);
                }
            }
            Err(Error::Empty("masked positions"))
        }
        TaskData::Span { train, .. } => {
            let seqs: Vec<Vec<u32>> = idx.iter().map(|&i| train[i].tokens.clone()).collect();
            let gold = idx.iter().map(|&i| train[i].spans.clone()).collect();
            loss::span_loss(cfg, p, &pad(&seqs, task)?.with_labels(Labels::Spans(gold)))
        }
        TaskData::Retrieval { train, .. } => {
            let q: Vec<Vec<u32>> = idx.iter().map(|&i| train[i].query.clone()).collect();
            let d: Vec<Vec<u32>> = idx.iter().map(|&i| train[i].doc.clone()).collect();
            loss::retrieval_loss(cfg, p, &pad(&q, task)?, &pad(&d, task)?)
        }
    }
}

/// Optimizer step driver shared by training and throughput measurement.
pub struct Trainer<T: Scalar> {
    pub model: Model<T>,
    pub adam: Adam,
    clip: Option<f64>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, adam: AdamConfig, clip: Option<f64>) -> Self {
        let opt = Adam::new(&model.params, adam);
        Self { model, adam: opt, clip }
    }

    /// Forward, backward and update with learning rate `lr`; returns the
    /// loss before the update.
    pub fn step(&mut self, lr: f64, loss_fn: impl for<'t> FnOnce(&Model<T>, &Bound<'t, T>) -> Result<Var<'t, T>>) -> Result<f64> {
        let tape = Tape::new();
        let bound = self.model.params.bind(&tape);
        let loss = loss_fn(&self.model, &bound)?;
        let value = loss.value().item().f64();
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "loss".into() });
        }
        let mut g = tape.backward(loss)?;
        let mut grads: Vec<_> = bound
            .vars()
            .iter()
            .enumerate()
            .map(|(i, &v)| self.model.params.is_trainable(i).then(|| g.take(v)))
            .collect();
        drop(bound);
        clip_global_norm(&mut grads, self.model.params.names(), self.clip)?;
        self.adam.update(&mut self.model.params, &grads, lr)?;
        Ok(value)
    }
}

/// Trains `model` on `task`, logging the mean training loss every
/// `log_every` updates and the dev metric at step 0, every `eval_every`
/// updates and at the end. Deterministic for a fixed seed.
pub fn train_run<T: Scalar>(model: Model<T>, task: &Task, cfg: &TrainConfig) -> Result<RunOutput<T>> {
    train_run_with(model, task, cfg, |_| {})
}

/// [`train_run`] with a callback receiving each history point as it is
/// logged.
pub fn train_run_with<T: Scalar>(
    model: Model<T>,
    task: &Task,
    cfg: &TrainConfig,
    mut on_point: impl FnMut(&CurvePoint),
) -> Result<RunOutput<T>> {
    cfg.validate()?;
    if task.train_len() == 0 && cfg.updates > 0 {
        return Err(Error::Empty("training split"));
    }
    let root = Rng::new(cfg.seed);
    let mut sampler = Sampler::new(task.train_len(), root.derive(1));
    let mut mask_rng = root.derive(2);
    let mut history = Vec::new();
    let mut push = |history: &mut Vec<CurvePoint>, step: usize, metric: &str, value: f64| {
        let pt = CurvePoint { step, metric: metric.to_string(), value };
        on_point(&pt);
        history.push(pt);
    };
    let mut trainer = Trainer::new(model, cfg.adam, cfg.clip_norm);
    let evaluate_now = |m: &Model<T>| if task.dev_len() > 0 { evaluate(m, task).map(Some) } else { Ok(None) };

    if let Some(m) = evaluate_now(&trainer.model)? {
        for (name, v) in m.entries() {
            push(&mut history, 0, &format!("dev_{name}"), v);
        }
    }
    let mut window = (0.0, 0usize);
    for step in 1..=cfg.updates {
        let idx = sampler.take(cfg.batch_size.min(task.train_len().max(1)));
        let lr = cfg.lr_at(step);
        let loss = trainer
            .step(lr, |m, p| batch_loss(m, p, task, &idx, &mut mask_rng))
            .map_err(|e| match e {
                Error::NonFinite { op } => Error::Diverged { step, last_good: step.checked_sub(1).filter(|&s| s > 0), cause: op },
                other => other,
            })?;
        window.0 += loss;
        window.1 += 1;
        if step % cfg.log_every == 0 || step == cfg.updates {
            push(&mut history, step, "train_loss", window.0 / window.1 as f64);
            window = (0.0, 0);
        }
        let eval_due = (cfg.eval_every > 0 && step % cfg.eval_every == 0) || step == cfg.updates;
        if eval_due {
            if let Some(m) = evaluate_now(&trainer.model)? {
                for (name, v) in m.entries() {
                    push(&mut history, step, &format!("dev_{name}"), v);
                }
            }
        }
    }
    let metrics = match evaluate_now(&trainer.model)? {
        Some(m) => m,
        None => return Err(Error::Empty("dev split")),
    };
    Ok(RunOutput { model: trainer.model, history, metrics, steps: cfg.updates })
}

fn chunks(n: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..n).step_by(EVAL_BATCH).map(move |s| s..(s + EVAL_BATCH).min(n))
}

/// Dev-set metrics; a pure function of the model weights and the split.
pub fn evaluate<T: Scalar>(model: &Model<T>, task: &Task) -> Result<MetricSet> {
    if task.dev_len() == 0 {
        return Err(Error::Empty("dev split"));
    }
    let cfg = &model.cfg;
    match &task.data {
        TaskData::Classification { dev, .. } => {
            let mut preds = Vec::with_capacity(dev.len());
            for r in chunks(dev.len()) {
                let ex: Vec<&TaskExample> = dev[r].iter().collect();
                let batch = class_batch(&ex, task.len, task.globals)?;
                let tape = Tape::new();
                let p = model.params.bind(&tape);
                let logits = loss::cls_logits(&p, encode(cfg, &p, &batch)?).value();
                preds.extend((0..batch.batch).map(|i| loss::argmax(logits.row(i))));
            }
            let gold: Vec<usize> = dev.iter().map(|e| e.target.class().unwrap_or(usize::MAX)).collect();
            Ok(MetricSet::Accuracy { value: accuracy(&preds, &gold), count: dev.len() })
        }
        TaskData::Mlm { dev, mask_rate, .. } => {
            let mut rng = Rng::new(EVAL_MASK_SEED);
            let (mut nll, mut count) = (0.0, 0usize);
            for r in chunks(dev.len()) {
                let batch = pad(&dev[r], task)?;
                let (masked, c) = apply_mlm_masking(&mut rng, &batch, *mask_rate)?;
                if c.selected() == 0 {
                    continue;
                }
                let tape = Tape::new();
                let p = model.params.bind(&tape);
                let l = loss::mlm_loss(cfg, &p, &masked)?.value().item().f64();
                nll += l * c.selected() as f64;
                count += c.selected();
            }
            if count == 0 {
                return Err(Error::Empty("masked dev positions"));
            }
            Ok(MetricSet::Perplexity { value: (nll / count as f64).exp(), count })
        }
        TaskData::Span { dev, .. } => {
            let (mut em, mut f1, mut count) = (0.0, 0.0, 0usize);
            for r in chunks(dev.len()) {
                let part = &dev[r];
                let seqs: Vec<Vec<u32>> = part.iter().map(|e| e.tokens.clone()).collect();
                let batch = pad(&seqs, task)?;
                let tape = Tape::new();
                let p = model.params.bind(&tape);
                let (s, e) = loss::span_logits(&p, encode(cfg, &p, &batch)?);
                let (s, e) = (s.value(), e.value());
                for (i, ex) in part.iter().enumerate() {
                    if ex.spans.is_empty() {
                        continue;
                    }
                    let allowed: Vec<bool> = (0..task.len)
                        .map(|j| j >= ex.context_start && j < ex.tokens.len() && !vocab::is_special(ex.tokens[j]))
                        .collect();
                    let start: Vec<f64> = s.row(i).iter().map(|x| x.f64()).collect();
                    let end: Vec<f64> = e.row(i).iter().map(|x| x.f64()).collect();
                    let golds: Vec<Vec<u32>> = ex.spans.iter().map(|&(a, b)| ex.tokens[a..=b].to_vec()).collect();
                    let pred = decode_span(&start, &end, &allowed).map(|(a, b)| ex.tokens[a..=b].to_vec()).unwrap_or_default();
                    let (x, y) = span_scores(&pred, &golds);
                    em += x;
                    f1 += y;
                    count += 1;
                }
            }
            if count == 0 {
                return Err(Error::Empty("dev examples with gold spans"));
            }
            Ok(MetricSet::Span { exact_match: em / count as f64, f1: f1 / count as f64, count })
        }
        TaskData::Retrieval { dev, .. } => {
            let embed = |seqs: Vec<Vec<u32>>| -> Result<Vec<Vec<f64>>> {
                let mut out = Vec::with_capacity(seqs.len());
                for r in chunks(seqs.len()) {
                    let batch = pad(&seqs[r], task)?;
                    let tape = Tape::new();
                    let p = model.params.bind(&tape);
                    let h = encode(cfg, &p, &batch)?.value();
                    let (l, d) = (batch.len, cfg.dim);
                    out.extend((0..batch.batch).map(|b| h.data()[b * l * d..b * l * d + d].iter().map(|x| x.f64()).collect()));
                }
                Ok(out)
            };
            let q = embed(dev.iter().map(|x| x.query.clone()).collect())?;
            let d = embed(dev.iter().map(|x| x.doc.clone()).collect())?;
            let ranks: Vec<usize> = q
                .iter()
                .enumerate()
                .map(|(i, qv)| {
                    let scores: Vec<f64> = d.iter().map(|dv| qv.iter().zip(dv).map(|(a, b)| a * b).sum()).collect();
                    rank_of(&scores, i)
                })
                .collect();
            Ok(MetricSet::Mrr { value: mean_reciprocal_rank(&ranks), count: ranks.len() })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{Overlap, Variant};
    use crate::model::{EncoderConfig, Head};
    use crate::tasks::{gen_corpus, corpus_sequences, LraTask};

    fn tiny(variant: Variant, len: usize) -> EncoderConfig {
        EncoderConfig::new(1, 16, 2, 32, len, variant)
    }

    fn listops_task(len: usize, n: usize) -> Task {
        let mut rng = Rng::new(11);
        let train = LraTask::Listops.generate(&mut rng, len, 2, n).unwrap();
        let dev = LraTask::Listops.generate(&mut rng, len, 2, 40).unwrap();
        Task { name: "listops".into(), data: TaskData::Classification { train, dev, n_classes: 10 }, len, globals: 1 }
    }

    fn quick(updates: usize) -> TrainConfig {
        TrainConfig { lr: 3e-3, updates, batch_size: 8, log_every: 5, eval_every: 10, ..TrainConfig::default() }
    }

    #[test]
    fn schedule_shape() {
        let c = TrainConfig { lr: 1.0, warmup: 0.1, updates: 100, ..TrainConfig::default() };
        assert!((c.lr_at(1) - 0.1).abs() < 1e-12);
        assert_eq!(c.lr_at(10), 1.0);
        assert!(c.lr_at(9) < 1.0 && c.lr_at(11) < 1.0);
        assert_eq!(c.lr_at(100), 0.0);
        let flat = TrainConfig { warmup: 0.0, ..c };
        assert_eq!(flat.lr_at(1), 0.99);
        assert_eq!(flat.lr_at(100), 0.0);
    }

    #[test]
    fn zero_updates_echo_the_model() {
        let task = listops_task(32, 16);
        let model = Model::<f32>::init(tiny(Variant::Exact, 32), Head::Cls { n_classes: 10 }, 1).unwrap();
        let out = train_run(model.clone(), &task, &quick(0)).unwrap();
        assert_eq!(out.steps, 0);
        for i in 0..model.params.len() {
            assert_eq!(out.model.params.tensor(i), model.params.tensor(i));
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let task = listops_task(32, 64);
        let variant = Variant::Blockwise { block: 8, overlap: Overlap::Half };
        let run = || {
            let model = Model::<f32>::init(tiny(variant.clone(), 32), Head::Cls { n_classes: 10 }, 1).unwrap();
            train_run(model, &task, &quick(20)).unwrap().history
        };
        let (a, b) = (run(), run());
        assert!(a.iter().any(|p| p.metric == "train_loss"));
        assert_eq!(a, b);
    }

    #[test]
    fn mlm_training_lowers_perplexity() {
        let text = gen_corpus(&mut Rng::new(2), 40_000);
        let seqs = corpus_sequences(&text, 32);
        let (dev, train) = seqs.split_at(40);
        let task = Task {
            name: "mlm".into(),
            data: TaskData::Mlm { train: train.to_vec(), dev: dev.to_vec(), mask_rate: 0.15 },
            len: 32,
            globals: 1,
        };
        let model = Model::<f32>::init(tiny(Variant::Exact, 32), Head::Mlm, 3).unwrap();
        let cfg = TrainConfig { lr: 3e-3, updates: 150, batch_size: 16, log_every: 50, eval_every: 0, ..TrainConfig::default() };
        let out = train_run(model, &task, &cfg).unwrap();
        let ppl: Vec<f64> = out.history.iter().filter(|p| p.metric == "dev_perplexity").map(|p| p.value).collect();
        assert!(ppl.last().unwrap() < &(ppl[0] * 0.7), "{ppl:?}");
        assert!(out.metrics.in_range());
    }

    #[test]
    fn divergence_is_reported() {
        let task = listops_task(32, 16);
        let mut model = Model::<f32>::init(tiny(Variant::Exact, 32), Head::Cls { n_classes: 10 }, 1).unwrap();
        let i = model.params.position("cls.b2").unwrap();
        model.params.tensor_mut(i).data_mut()[0] = f32::NAN;
        let err = train_run(model, &task, &TrainConfig { eval_every: 0, ..quick(3) }).unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 1, last_good: None, .. }) || matches!(err, Error::NonFinite { .. }), "{err}");
    }

    #[test]
    fn span_and_retrieval_evaluate_in_range() {
        let len = 32;
        let mut rng = Rng::new(5);
        let mk_doc = |rng: &mut Rng| -> Vec<u32> {
            std::iter::once(vocab::CLS).chain((1..len).map(|_| u32::from(b'a') + rng.below(26) as u32)).collect()
        };
        let spans: Vec<SpanExample> =
            (0..6).map(|i| SpanExample { tokens: mk_doc(&mut rng), spans: vec![(3 + i, 5 + i)], context_start: 1 }).collect();
        let span_task = Task { name: "span".into(), data: TaskData::Span { train: spans.clone(), dev: spans }, len, globals: 0 };
        let model = Model::<f32>::init(tiny(Variant::Exact, len), Head::Span, 1).unwrap();
        let cfg = TrainConfig { updates: 4, batch_size: 3, eval_every: 0, ..quick(4) };
        let out = train_run(model, &span_task, &cfg).unwrap();
        assert!(out.metrics.in_range(), "{:?}", out.metrics);

        let pairs: Vec<RetrievalPair> = (0..6).map(|_| RetrievalPair { query: mk_doc(&mut rng)[..8].to_vec(), doc: mk_doc(&mut rng) }).collect();
        let r_task = Task { name: "ret".into(), data: TaskData::Retrieval { train: pairs.clone(), dev: pairs }, len, globals: 0 };
        let model = Model::<f32>::init(tiny(Variant::Exact, len), Head::Retrieval, 1).unwrap();
        let out = train_run(model, &r_task, &cfg).unwrap();
        let MetricSet::Mrr { value, count } = out.metrics else { panic!() };
        assert_eq!(count, 6);
        assert!(value >= 1.0 / 6.0 - 1e-12 && value <= 1.0);
        assert_eq!(evaluate(&out.model, &r_task).unwrap(), out.metrics);
    }
}
