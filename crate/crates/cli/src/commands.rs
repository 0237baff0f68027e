//! Command implementations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use longattn_core::checks::{run_checks, CheckOptions, Suite};
use longattn_core::cost::{count_model_flops, hardware_note, measure_throughput, CostReport};
use longattn_core::model::{load_checkpoint, save_checkpoint, EncoderConfig, Head, Model};
use longattn_core::tasks::{corpus_sequences, gen_corpus, load_longdoc_jsonl, LongDocExample, LraTask, Target, TaskExample};
use longattn_core::tensor::Rng;
use longattn_core::train::{grid_search, train_run_with, Grid, RetrievalPair, SpanExample, Task, TaskData};
use longattn_core::{vocab, Variant};

use crate::config::{Command, RunConfig};
use crate::error::CliError;
use crate::output::{self, overlap_name, CurveRow, ResultRow, SCHEMA_VERSION};

/// Outcome of one command, for tests and the summary line.
#[derive(Debug, Default)]
pub struct CommandOutput {
    pub out_dir: PathBuf,
    pub results: Vec<ResultRow>,
    pub curves: Vec<CurveRow>,
}

pub fn execute(cfg: &RunConfig) -> Result<CommandOutput, CliError> {
    let command = cfg.command.expect("resolved config");
    if command == Command::Report {
        return crate::report::report(cfg);
    }
    let dir = cfg.out_dir().to_path_buf();
    output::prepare_dir(&dir)?;
    output::write_config(&dir, cfg)?;
    let out = match command {
        Command::Lra | Command::Mlm | Command::Finetune => train_command(cfg, &dir)?,
        Command::Bench => bench(cfg, &dir)?,
        Command::Check => check(cfg, &dir)?,
        Command::Report => unreachable!(),
    };
    Ok(out)
}

fn run_id(task: &str, v: &Variant, len: usize, g: usize, lr: f64, warmup: f64, seed: u64) -> String {
    let mut id = format!("{task}-{}", v.tag());
    if v.scale_param() > 0 {
        id += &format!("-b{}", v.scale_param());
    }
    if let Some(o) = v.overlap() {
        id += &format!("-{}", overlap_name(Some(o)));
    }
    id + &format!("-L{len}-g{g}-lr{lr}-w{warmup}-s{seed}")
}

/// Task data for one sequence length, plus the head that trains on it.
fn build_task(cfg: &RunConfig, len: usize) -> Result<(Task, Head), CliError> {
    let command = cfg.command.expect("resolved");
    let name = cfg.task.clone().unwrap_or_default();
    let globals = cfg.globals.unwrap_or(0);
    let data_seed = cfg.data_seed.unwrap_or(0);
    let (data, head) = match command {
        Command::Lra => {
            let t = LraTask::parse(&name)?;
            let depth = cfg.max_depth.unwrap_or(3);
            let root = Rng::new(data_seed);
            let train = t.generate(&mut root.derive(1), len, depth, cfg.train_size.unwrap_or(0))?;
            let dev = t.generate(&mut root.derive(2), len, depth, cfg.dev_size.unwrap_or(0))?;
            (TaskData::Classification { train, dev, n_classes: t.n_classes() }, Head::Cls { n_classes: t.n_classes() })
        }
        Command::Mlm => {
            if name != "synthetic" {
                return Err(CliError::Usage(format!("mlm task must be `synthetic`, got {name:?}")));
            }
            let text = gen_corpus(&mut Rng::new(data_seed), cfg.corpus_bytes.unwrap_or(0));
            let mut train = corpus_sequences(&text, len);
            let dev_n = cfg.dev_size.unwrap_or(0);
            if dev_n >= train.len() {
                return Err(CliError::Usage(format!("corpus yields {} sequences of {len}; dev_size {dev_n} leaves none to train on", train.len())));
            }
            let dev = train.split_off(train.len() - dev_n);
            (TaskData::Mlm { train, dev, mask_rate: cfg.mask_rate.unwrap_or(longattn_core::tasks::DEFAULT_MASK_RATE) }, Head::Mlm)
        }
        Command::Finetune => finetune_data(cfg, &name, len)?,
        _ => unreachable!(),
    };
    Ok((Task { name, data, len, globals }, head))
}

fn read_corpus(path: &Path, len: usize) -> Result<Vec<LongDocExample>, CliError> {
    let mut docs = Vec::new();
    let mut bad = 0;
    for item in load_longdoc_jsonl(path, len)? {
        match item {
            Ok(d) => docs.push(d),
            Err(e) => {
                bad += 1;
                eprintln!("warning: {}: {e}", path.display());
            }
        }
    }
    if docs.is_empty() {
        return Err(CliError::Runtime(format!("{}: no usable documents ({bad} malformed)", path.display())));
    }
    Ok(docs)
}

fn finetune_data(cfg: &RunConfig, name: &str, len: usize) -> Result<(TaskData, Head), CliError> {
    let train = read_corpus(cfg.train_file.as_deref().expect("resolved"), len)?;
    let dev = read_corpus(cfg.dev_file.as_deref().expect("resolved"), len)?;
    match name {
        "span" => {
            let flagged = train.iter().filter(|d| d.flagged).count();
            if flagged > 0 {
                eprintln!("note: {flagged} training documents have no answer inside the first {len} tokens and are left out");
            }
            let tr: Vec<SpanExample> = train.iter().filter(|d| !d.flagged).map(SpanExample::from).collect();
            Ok((TaskData::Span { train: tr, dev: dev.iter().map(SpanExample::from).collect() }, Head::Span))
        }
        "cls" => {
            let class_of = |d: &LongDocExample| -> Result<TaskExample, CliError> {
                match d.example.target {
                    Target::Class(_) => Ok(d.example.clone()),
                    _ => Err(CliError::Runtime(format!("document {:?} has no label", d.doc.id))),
                }
            };
            let tr = train.iter().map(class_of).collect::<Result<Vec<_>, _>>()?;
            let dv = dev.iter().map(class_of).collect::<Result<Vec<_>, _>>()?;
            let n = tr.iter().chain(&dv).filter_map(|e| e.target.class()).max().map_or(0, |m| m + 1).max(2);
            Ok((TaskData::Classification { train: tr, dev: dv, n_classes: n }, Head::Cls { n_classes: n }))
        }
        "retrieval" => {
            let pairs = |docs: &[LongDocExample]| -> Vec<RetrievalPair> {
                docs.iter()
                    .filter(|d| d.doc.positive != Some(false))
                    .filter_map(|d| {
                        let q = d.doc.query.as_ref()?;
                        let mut query = vec![vocab::CLS];
                        query.extend(vocab::encode(q));
                        query.truncate(len);
                        let mut doc = vec![vocab::CLS];
                        doc.extend(vocab::encode(&d.doc.text));
                        doc.truncate(len);
                        Some(RetrievalPair { query, doc })
                    })
                    .collect()
            };
            let (tr, dv) = (pairs(&train), pairs(&dev));
            if tr.is_empty() || dv.is_empty() {
                return Err(CliError::Runtime("retrieval needs documents with a query in both splits".into()));
            }
            Ok((TaskData::Retrieval { train: tr, dev: dv }, Head::Retrieval))
        }
        other => Err(CliError::Usage(format!("finetune task must be span, cls or retrieval, got {other:?}"))),
    }
}

fn initial_model(cfg: &RunConfig, enc: &EncoderConfig, head: Head, seed: u64) -> Result<Model<f32>, CliError> {
    match &cfg.init_checkpoint {
        None => Ok(Model::init(enc.clone(), head, seed)?),
        Some(path) => {
            let mut base = load_checkpoint::<f32>(path)?.model;
            base.cfg = enc.clone();
            Ok(base.with_head(head, seed)?)
        }
    }
}

fn train_command(cfg: &RunConfig, dir: &Path) -> Result<CommandOutput, CliError> {
    let preset = cfg.preset.as_deref().expect("resolved");
    let ckpt_dir = dir.join("checkpoints");
    let save = cfg.save_checkpoints.unwrap_or(false);
    if save {
        std::fs::create_dir_all(&ckpt_dir)?;
    }
    let mut results = Vec::new();
    let mut curves = Vec::new();
    let mut grid_rows: Vec<Vec<String>> = Vec::new();
    let variants = cfg.variants()?;
    for &len in cfg.lens() {
        let (task, head) = build_task(cfg, len)?;
        for v in &variants {
            let enc = EncoderConfig::preset(preset, v.clone(), len)?;
            let flops = count_model_flops(&enc, &head, len, task.globals).total;
            let grid = Grid { lrs: cfg.lr.clone().unwrap_or_default(), warmups: cfg.warmup.clone().unwrap_or_default(), seeds: cfg.seeds().to_vec() };
            let base = cfg.train_config(grid.seeds[0], grid.lrs[0], grid.warmups[0]);
            let mut runs: BTreeMap<(u64, u64, u64), Vec<ResultRow>> = BTreeMap::new();
            let outcome = grid_search(&base, &grid, |tc| {
                let id = run_id(&task.name, v, len, task.globals, tc.lr, tc.warmup, tc.seed);
                eprintln!("run {id}");
                let model = initial_model(cfg, &enc, head, tc.seed).map_err(|e| longattn_core::Error::InvalidArgument(e.to_string()))?;
                let out = train_run_with(model, &task, tc, |p| {
                    if p.metric.starts_with("dev_") {
                        eprintln!("  step {:>6} {} {:.4}", p.step, p.metric, p.value);
                    }
                })?;
                curves.extend(out.history.iter().map(|p| CurveRow { run_id: id.clone(), step: p.step, metric_name: p.metric.clone(), value: p.value }));
                if save {
                    let meta = serde_json::json!({ "run_id": id, "config": cfg, "train": tc, "steps": out.steps });
                    save_checkpoint(&ckpt_dir.join(format!("{id}.ckpt")), &out.model, &meta)?;
                }
                let rows = out
                    .metrics
                    .entries()
                    .into_iter()
                    .chain([("count", out.metrics.count() as f64)])
                    .map(|(name, value)| ResultRow {
                        schema_version: SCHEMA_VERSION,
                        run_id: id.clone(),
                        variant: v.tag().into(),
                        task: task.name.clone(),
                        len,
                        block_or_window: v.scale_param(),
                        overlap: overlap_name(v.overlap()).into(),
                        g: task.globals,
                        seed: tc.seed,
                        metric_name: name.into(),
                        metric_value: value,
                        flops,
                        words_per_sec: None,
                    })
                    .collect();
                runs.insert((tc.lr.to_bits(), tc.warmup.to_bits(), tc.seed), rows);
                Ok(out.metrics)
            })?;
            let best = outcome.best_row();
            for row in &outcome.rows {
                for (seed, e) in &row.failed {
                    eprintln!("warning: lr {} warmup {} seed {seed} failed: {e}", row.lr, row.warmup);
                }
                grid_rows.push(vec![
                    v.tag().into(),
                    v.scale_param().to_string(),
                    len.to_string(),
                    output::fmt_f64(row.lr),
                    output::fmt_f64(row.warmup),
                    row.mean_score.map(output::fmt_f64).unwrap_or_default(),
                    row.runs.len().to_string(),
                    row.failed.len().to_string(),
                    (std::ptr::eq(row, best)).to_string(),
                ]);
            }
            for &(seed, _) in &best.runs {
                results.extend(runs.remove(&(best.lr.to_bits(), best.warmup.to_bits(), seed)).unwrap_or_default());
            }
        }
    }
    output::write_results(&dir.join(output::RESULTS_FILE), &results)?;
    output::write_curves(&dir.join(output::CURVES_FILE), &curves)?;
    if cfg.lr.as_ref().map_or(0, Vec::len) * cfg.warmup.as_ref().map_or(0, Vec::len) > 1 {
        let mut w = csv::Writer::from_path(dir.join(output::GRID_FILE))?;
        w.write_record(["variant", "block_or_window", "L", "lr", "warmup", "mean_score", "finished", "failed", "best"])?;
        for r in &grid_rows {
            w.write_record(r)?;
        }
        w.flush()?;
    }
    Ok(CommandOutput { out_dir: dir.to_path_buf(), results, curves })
}

fn bench(cfg: &RunConfig, dir: &Path) -> Result<CommandOutput, CliError> {
    let preset = cfg.preset.as_deref().expect("resolved");
    let task = cfg.task.clone().unwrap_or_default();
    let head = Head::Cls { n_classes: 10 };
    let g = cfg.globals.unwrap_or(0);
    let measure = cfg.measure.unwrap_or(false);
    let seed = cfg.seeds()[0];
    let mut reports = Vec::new();
    let mut results = Vec::new();
    for &len in cfg.lens() {
        for v in cfg.variants()? {
            let enc = EncoderConfig::preset(preset, v.clone(), len)?;
            let mut r = CostReport::analytic(&enc, &head, len, g);
            if measure {
                let secs = cfg.duration_secs.unwrap_or(10.0);
                let t = measure_throughput(&enc, len, cfg.bench_batch.unwrap_or(1), Duration::from_secs_f64(secs))?;
                r = r.with_throughput(t.words_per_sec, hardware_note());
            }
            eprintln!(
                "{:<15} L={len:<6} b={:<5} flops={:.3e} attn={:.3e} mem={:.1}MiB{}",
                r.variant,
                r.block_or_window,
                r.flops as f64,
                r.attention_flops as f64,
                r.peak_memory_bytes as f64 / (1 << 20) as f64,
                r.words_per_sec.map(|w| format!(" words/s={w:.1}")).unwrap_or_default()
            );
            let id = format!("{task}-{}-b{}{}-L{len}-g{g}", r.variant, r.block_or_window, v.overlap().map(|o| format!("-{}", overlap_name(Some(o)))).unwrap_or_default());
            for (name, value) in [
                ("flops", r.flops as f64),
                ("attention_flops", r.attention_flops as f64),
                ("peak_memory_bytes", r.peak_memory_bytes as f64),
            ] {
                results.push(ResultRow {
                    schema_version: SCHEMA_VERSION,
                    run_id: id.clone(),
                    variant: r.variant.clone(),
                    task: task.clone(),
                    len,
                    block_or_window: r.block_or_window,
                    overlap: overlap_name(r.overlap).into(),
                    g,
                    seed,
                    metric_name: name.into(),
                    metric_value: value,
                    flops: r.flops,
                    words_per_sec: r.words_per_sec,
                });
            }
            reports.push(r);
        }
    }
    output::write_jsonl(&dir.join(output::COST_FILE), &reports)?;
    output::write_results(&dir.join(output::RESULTS_FILE), &results)?;
    Ok(CommandOutput { out_dir: dir.to_path_buf(), results, curves: Vec::new() })
}

fn check(cfg: &RunConfig, dir: &Path) -> Result<CommandOutput, CliError> {
    let tags = cfg.variant.clone().unwrap_or_default();
    let tag = match tags.as_slice() {
        [one] => one.as_str(),
        _ => return Err(CliError::Usage("check takes a single --variant (or all)".into())),
    };
    let mut opts = CheckOptions::for_variant(tag)?;
    opts.seed = cfg.seeds()[0];
    let suites = cfg
        .suites
        .as_deref()
        .unwrap_or_default()
        .iter()
        .map(|s| Suite::parse(s))
        .collect::<Result<Vec<_>, _>>()?;
    let reports = run_checks(&suites, &opts)?;
    let mut w = csv::Writer::from_path(dir.join(output::CHECKS_FILE))?;
    w.write_record(["suite", "check", "value", "bound", "passed"])?;
    let mut failed = Vec::new();
    for rep in &reports {
        for r in &rep.results {
            println!("{} {:<14} {:<60} {:>12.4e}  {}", if r.passed { "PASS" } else { "FAIL" }, rep.suite.name(), r.name, r.value, r.bound);
            w.write_record([rep.suite.name(), &r.name, &output::fmt_f64(r.value), &r.bound.to_string(), &r.passed.to_string()])?;
            if !r.passed {
                failed.push(format!("{}/{}", rep.suite.name(), r.name));
            }
        }
        eprintln!("{}: {} checks in {:.1}s", rep.suite.name(), rep.results.len(), rep.seconds);
    }
    w.flush()?;
    if !failed.is_empty() {
        return Err(CliError::CheckFailed(format!("{} check(s) failed: {}", failed.len(), failed.join(", "))));
    }
    Ok(CommandOutput { out_dir: dir.to_path_buf(), ..Default::default() })
}
