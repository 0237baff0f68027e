use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{loss, BatchInput, EncoderConfig, Head, Labels, Model};
use crate::tensor::Rng;
use crate::train::{AdamConfig, Trainer};

/// Timed windows per measurement.
pub const WINDOWS: usize = 5;

/// Train-step token throughput: the median window and every window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub words_per_sec: f64,
    pub windows: Vec<f64>,
    pub steps: usize,
}

/// Tokens per second of full training steps (forward, backward, Adam
/// update) on random `batch x len` inputs with a classification head.
///
/// One warm-up step runs first and is not timed; `duration` is split into
/// [`WINDOWS`] equal windows, each running whole steps until its share has
/// elapsed. Requires exclusive use of the machine while it runs.
pub fn measure_throughput(enc: &EncoderConfig, len: usize, batch: usize, duration: Duration) -> Result<Throughput> {
    if batch == 0 {
        return Err(Error::InvalidArgument("batch must be positive".into()));
    }
    let model = Model::<f32>::init(enc.clone(), Head::Cls { n_classes: 2 }, 0)?;
    let mut rng = Rng::new(1);
    let seqs: Vec<Vec<u32>> = (0..batch).map(|_| (0..len).map(|_| rng.below(256) as u32).collect()).collect();
    let labels = (0..batch).map(|i| i % 2).collect();
    let input = BatchInput::from_sequences(&seqs, None, 0)?.with_labels(Labels::Class(labels));
    let mut trainer = Trainer::new(model, AdamConfig::default(), Some(1.0));
    let step = |t: &mut Trainer<f32>| t.step(1e-4, |m, p| Ok(loss::cls_loss(&m.cfg, p, &input, 2)?.0));

    let warm = Instant::now();
    step(&mut trainer)?;
    let one = warm.elapsed();
    let window = duration / WINDOWS as u32;
    if one > window {
        return Err(Error::InvalidArgument(format!(
            "duration {duration:?} too short: one step took {one:?}, each of {WINDOWS} windows needs at least that"
        )));
    }
    let tokens = (batch * len) as f64;
    let mut windows = Vec::with_capacity(WINDOWS);
    let mut steps = 0;
    for _ in 0..WINDOWS {
        let t0 = Instant::now();
        let mut n = 0;
        while n == 0 || t0.elapsed() < window {
            step(&mut trainer)?;
            n += 1;
        }
        steps += n;
        windows.push(tokens * n as f64 / t0.elapsed().as_secs_f64());
    }
    let mut sorted = windows.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(Throughput { words_per_sec: sorted[WINDOWS / 2], windows, steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::Variant;

    #[test]
    fn too_short_duration_is_rejected() {
        let enc = EncoderConfig::new(1, 16, 2, 32, 64, Variant::Exact);
        assert!(measure_throughput(&enc, 64, 2, Duration::from_nanos(5)).is_err());
        let t = measure_throughput(&enc, 64, 2, Duration::from_millis(100)).unwrap();
        assert_eq!(t.windows.len(), WINDOWS);
        assert!(t.words_per_sec > 0.0 && t.steps >= WINDOWS);
    }
}
