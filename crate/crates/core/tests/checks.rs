use longattn_core::checks::{run_suite, CheckOptions, Suite};

fn all_pass(suite: Suite, opts: &CheckOptions) {
    let rep = run_suite(suite, opts).unwrap();
    assert!(!rep.results.is_empty());
    let failed: Vec<_> = rep.failures().map(|r| format!("{} = {} ({})", r.name, r.value, r.bound)).collect();
    assert!(failed.is_empty(), "{failed:?}");
}

#[test]
fn oracle_suite() {
    all_pass(Suite::Oracle, &CheckOptions::default());
}

#[test]
fn limit_suite() {
    all_pass(Suite::Limits, &CheckOptions::default());
}

#[test]
fn receptive_field_suite() {
    all_pass(Suite::ReceptiveField, &CheckOptions::default());
}

#[test]
fn performer_suite() {
    all_pass(Suite::Performer, &CheckOptions::default());
}

#[test]
fn gradient_suite_for_blockwise() {
    all_pass(Suite::Gradient, &CheckOptions::for_variant("blockwise").unwrap());
}

#[test]
fn flop_suite_except_nystrom_doubling() {
    let rep = run_suite(Suite::Flops, &CheckOptions::default()).unwrap();
    let failed: Vec<_> = rep.failures().map(|r| r.name.clone()).collect();
    // Nystrom's landmark pinv and convolution keep its cost super-linear
    // until L is far above the default landmark count
    assert!(failed.iter().all(|n| n.contains("nystrom")), "{failed:?}");
    for tag in ["blockwise", "sliding_window", "linformer", "performer"] {
        let r = CheckOptions::for_variant(tag).unwrap();
        all_pass(Suite::Flops, &r);
    }
}
