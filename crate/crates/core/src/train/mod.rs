//! Optimization, training loops, grid search and evaluation.

mod grid;
mod metrics;
mod optim;
mod run;

pub use grid::{grid_search, Grid, GridResult, GridRow};
pub use metrics::{
    accuracy, decode_span, mean_reciprocal_rank, rank_of, span_scores, token_f1, MetricSet, MAX_ANSWER_LEN,
};
pub use optim::{clip_global_norm, global_norm, Adam, AdamConfig};
pub use run::{
    evaluate, train_run, train_run_with, CurvePoint, RetrievalPair, RunOutput, SpanExample, Task, TaskData, TrainConfig,
    Trainer, EVAL_BATCH, EVAL_MASK_SEED,
};
