use longattn_core::attention::{Overlap, Variant};
use longattn_core::model::{EncoderConfig, Head, Model};
use longattn_core::tasks::LraTask;
use longattn_core::tensor::Rng;
use longattn_core::train::{evaluate, grid_search, train_run, Grid, MetricSet, Task, TaskData, TrainConfig};
use proptest::prelude::*;

fn listops_task(len: usize) -> Task {
    let root = Rng::new(7);
    let train = LraTask::Listops.generate(&mut root.derive(1), len, 2, 64).unwrap();
    let dev = LraTask::Listops.generate(&mut root.derive(2), len, 2, 32).unwrap();
    Task { name: "listops".into(), data: TaskData::Classification { train, dev, n_classes: 10 }, len, globals: 1 }
}

fn model(seed: u64) -> Model<f32> {
    let enc = EncoderConfig::new(1, 16, 2, 32, 32, Variant::Blockwise { block: 8, overlap: Overlap::Half });
    Model::init(enc, Head::Cls { n_classes: 10 }, seed).unwrap()
}

fn cfg(updates: usize) -> TrainConfig {
    TrainConfig { lr: 1e-3, updates, batch_size: 8, log_every: 2, eval_every: 4, ..TrainConfig::default() }
}

#[test]
fn fixed_seed_reproduces_the_history() {
    let task = listops_task(32);
    let a = train_run(model(1), &task, &cfg(8)).unwrap();
    let b = train_run(model(1), &task, &cfg(8)).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.history.iter().filter(|p| p.metric == "train_loss").count(), 4);
    let c = train_run(model(1), &task, &TrainConfig { seed: 9, ..cfg(8) }).unwrap();
    assert_ne!(a.history, c.history);
}

#[test]
fn zero_updates_echo_the_initial_model() {
    let task = listops_task(32);
    let m = model(4);
    let out = train_run(m.clone(), &task, &cfg(0)).unwrap();
    for ((_, a, _), (_, b, _)) in m.params.iter().zip(out.model.params.iter()) {
        assert_eq!(a.data(), b.data());
    }
    assert_eq!(out.metrics, evaluate(&m, &task).unwrap());
    assert!(out.metrics.in_range());
}

#[test]
fn best_grid_cell_dominates_the_table() {
    let task = listops_task(32);
    let grid = Grid { lrs: vec![1e-4, 3e-3], warmups: vec![0.0, 0.1], seeds: vec![1, 2] };
    let r = grid_search(&cfg(6), &grid, |c| Ok(train_run(model(c.seed), &task, c)?.metrics)).unwrap();
    assert_eq!(r.rows.len(), 4);
    let best = r.best_row().mean_score.unwrap();
    for row in &r.rows {
        assert!(row.mean_score.unwrap() <= best);
        assert!(row.runs.iter().all(|(_, m)| matches!(m, MetricSet::Accuracy { count: 32, .. })));
    }
}

proptest! {
    #[test]
    fn schedule_warms_up_then_decays_to_zero(lr in 1e-5f64..1e-1, updates in 1usize..5000, warm in prop_oneof![Just(0.0), Just(0.1), 0.0f64..1.0]) {
        let c = TrainConfig { lr, warmup: warm, updates, ..TrainConfig::default() };
        let w = c.warmup_steps();
        prop_assert_eq!(c.lr_at(updates), if w == updates { lr } else { 0.0 });
        let peak = (1..=updates).map(|s| c.lr_at(s)).fold(0.0, f64::max);
        prop_assert!(peak <= lr * (1.0 + 1e-12));
        if w > 0 {
            prop_assert!((c.lr_at(w) - lr).abs() < 1e-12 * lr);
            prop_assert!(c.lr_at(1) <= lr / w as f64 * (1.0 + 1e-12));
        }
        for s in 1..updates {
            if s >= w.max(1) {
                prop_assert!(c.lr_at(s + 1) <= c.lr_at(s));
            }
        }
    }
}
