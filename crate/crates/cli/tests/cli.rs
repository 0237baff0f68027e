use std::fs;
use std::path::Path;

use longattn_cli::output::{self, fmt_f64, CurveRow, ResultRow};
use longattn_cli::report::read_summary;
use longattn_cli::{parse_cli, run, CliError};
use proptest::prelude::*;
use tempfile::tempdir;

fn argv(args: &[&str]) -> Vec<String> {
    std::iter::once("longattn").chain(args.iter().copied()).map(String::from).collect()
}

fn code(args: &[&str]) -> i32 {
    run(argv(args))
}

fn tiny_lra(out: &Path, seed: &str) -> Vec<String> {
    argv(&[
        "lra", "--variant", "blockwise,exact", "--block", "8", "--L", "32", "--train-size", "40", "--dev-size", "16", "--updates", "6",
        "--batch-size", "4", "--log-every", "2", "--eval-every", "3", "--seed", seed, "--out-dir", out.to_str().unwrap(),
    ])
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["lra", "--no-such-flag"]), 1);
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["lra", "--variant", "quadratic"]), 1);
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["--version"]), 0);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"updates": 3, "learning_rate": 0.1}"#).unwrap();
    let err = parse_cli(argv(&["lra", "--config", cfg.to_str().unwrap()])).unwrap_err();
    assert!(matches!(err, CliError::Usage(_)), "{err:?}");
    assert!(err.to_string().contains("learning_rate"));
}

#[test]
fn flags_override_config_file() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"updates": 3, "batch_size": 5, "len": [128]}"#).unwrap();
    let c = parse_cli(argv(&["lra", "--config", cfg.to_str().unwrap(), "--updates", "9"])).unwrap();
    assert_eq!((c.updates, c.batch_size, c.len.clone()), (Some(9), Some(5), Some(vec![128])));
}

#[test]
fn unwritable_output_exits_2() {
    let dir = tempdir().unwrap();
    let file = dir.path().join("occupied");
    fs::write(&file, "x").unwrap();
    let out = file.join("sub");
    assert_eq!(code(&["bench", "--variant", "exact", "--L", "64", "--out-dir", out.to_str().unwrap()]), 2);
}

#[test]
fn bench_emits_one_cost_report_row() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("b");
    assert_eq!(code(&["bench", "--variant", "blockwise", "--overlap", "none", "--L", "4096", "--out-dir", out.to_str().unwrap()]), 0);
    let lines: Vec<serde_json::Value> =
        fs::read_to_string(out.join(output::COST_FILE)).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 1);
    assert_eq!(lines[0]["variant"], "blockwise");
    assert_eq!(lines[0]["overlap"], "none");
    assert_eq!(lines[0]["len"], 4096);
    let cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join(output::CONFIG_FILE)).unwrap()).unwrap();
    assert_eq!(cfg["command"], "bench");
}

#[test]
fn check_runs_selected_suites() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("c");
    assert_eq!(code(&["check", "--variant", "blockwise", "--suites", "limits,receptive_field", "--out-dir", out.to_str().unwrap()]), 0);
    let text = fs::read_to_string(out.join(output::CHECKS_FILE)).unwrap();
    assert!(text.lines().count() > 2);
    assert!(text.lines().skip(1).all(|l| l.ends_with(",true")));
    assert_eq!(code(&["check", "--suites", "nonsense", "--out-dir", out.to_str().unwrap()]), 1);
}

#[test]
fn lra_run_writes_tables_and_is_reproducible() {
    let dir = tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(run(tiny_lra(&a, "3")), 0);
    assert_eq!(run(tiny_lra(&b, "3")), 0);
    for f in [output::RESULTS_FILE, output::CURVES_FILE] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let rows = output::read_results(&a.join(output::RESULTS_FILE)).unwrap();
    assert_eq!(rows.iter().filter(|r| r.metric_name == "accuracy").count(), 2);
    assert!(rows.iter().all(|r| r.len == 32 && r.seed == 3 && r.flops > 0));
    let curves = output::read_curves(&a.join(output::CURVES_FILE)).unwrap();
    assert!(curves.iter().any(|c| c.metric_name == "train_loss" && c.step == 6));
    assert!(curves.iter().any(|c| c.metric_name == "dev_accuracy" && c.step == 0));
    let ckpts = fs::read_dir(a.join("checkpoints")).unwrap().count();
    assert_eq!(ckpts, 2);
}

#[test]
fn mlm_block_sweep_reports_one_row_per_block() {
    let dir = tempdir().unwrap();
    let runs = dir.path().join("mlm");
    let args = [
        "mlm", "--variant", "blockwise", "--block", "16,8", "--preset", "lra2", "--L", "32", "--corpus-bytes", "4000",
        "--dev-size", "4", "--updates", "2", "--batch-size", "2", "--seed", "1,2", "--out-dir", runs.to_str().unwrap(),
    ];
    assert_eq!(code(&args), 0);
    let produced = output::read_results(&runs.join(output::RESULTS_FILE)).unwrap();
    let rep = dir.path().join("rep");
    assert_eq!(code(&["report", "--runs", runs.to_str().unwrap(), "--out-dir", rep.to_str().unwrap()]), 0);
    let summary = read_summary(&rep.join(output::SUMMARY_FILE)).unwrap();
    let ppl: Vec<_> = summary.iter().filter(|s| s.metric_name == "perplexity").collect();
    assert_eq!(ppl.iter().map(|s| s.block_or_window).collect::<Vec<_>>(), vec![8, 16]);
    for s in &ppl {
        let mut vals: Vec<f64> = produced
            .iter()
            .filter(|r| r.metric_name == "perplexity" && r.block_or_window == s.block_or_window)
            .map(|r| r.metric_value)
            .collect();
        vals.sort_by(f64::total_cmp);
        assert_eq!(s.n, 2);
        assert_eq!((s.min, s.max, s.median), (vals[0], vals[1], (vals[0] + vals[1]) / 2.0));
    }
    assert_eq!(code(&["report", "--out-dir", rep.to_str().unwrap()]), 1);
}

#[test]
fn empty_history_gives_header_only_curves() {
    let dir = tempdir().unwrap();
    let p = dir.path().join("curves.csv");
    output::write_curves(&p, &[]).unwrap();
    assert_eq!(fs::read_to_string(&p).unwrap(), "run_id,step,metric_name,value\n");
    assert!(output::read_curves(&p).unwrap().is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn written_values_reparse_exactly(values in proptest::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), 1..20),
                                     wps in proptest::option::of(0.0f64..1e9)) {
        let dir = tempdir().unwrap();
        let rows: Vec<ResultRow> = values.iter().enumerate().map(|(i, &v)| ResultRow {
            schema_version: output::SCHEMA_VERSION,
            run_id: format!("r{i}"),
            variant: "exact".into(),
            task: "t".into(),
            len: 8,
            block_or_window: 0,
            overlap: String::new(),
            g: 0,
            seed: i as u64,
            metric_name: "m".into(),
            metric_value: v,
            flops: 1,
            words_per_sec: wps,
        }).collect();
        let p = dir.path().join("r.csv");
        output::write_results(&p, &rows).unwrap();
        prop_assert_eq!(output::read_results(&p).unwrap(), rows);
        let curves: Vec<CurveRow> = values.iter().enumerate().map(|(i, &v)| CurveRow { run_id: "x".into(), step: i, metric_name: "loss".into(), value: v }).collect();
        let c = dir.path().join("c.csv");
        output::write_curves(&c, &curves).unwrap();
        prop_assert_eq!(output::read_curves(&c).unwrap(), curves);
    }

    #[test]
    fn float_text_has_seventeen_significant_digits(x in any::<f64>().prop_filter("finite", |x| x.is_finite())) {
        let s = fmt_f64(x);
        let mantissa = s.trim_start_matches('-').split('e').next().unwrap().replace('.', "");
        prop_assert_eq!(mantissa.len(), 17);
        prop_assert_eq!(s.parse::<f64>().unwrap().to_bits(), x.to_bits());
    }
}
