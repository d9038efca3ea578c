//! Forward-latency measurement.

use std::time::Instant;

use crate::error::{invalid, Result};
use crate::model::Model;
use crate::tensor::{Dims, Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub parameters: usize,
    pub input_size: usize,
    pub warmup: usize,
    /// Per-iteration latencies in milliseconds, warmup excluded.
    pub samples_ms: Vec<f64>,
    pub mean_ms: f64,
    pub std_ms: f64,
}

impl BenchReport {
    pub fn cv(&self) -> f64 {
        self.std_ms / self.mean_ms
    }
}

/// Times `iters` evaluation-mode cascade passes on a fixed ramp image after
/// `warmup` untimed passes.
pub fn bench_forward<T: Real>(model: &Model<T>, warmup: usize, iters: usize) -> Result<BenchReport> {
    if iters < 2 {
        return Err(invalid!("need at least 2 timed iterations, got {iters}"));
    }
    let s = model.config.input_size;
    let image = Tensor::from_fn(Dims::new(1, 1, s, s), |_, _, y, x| T::lit(((y + x) % s) as f64 / s as f64));
    for _ in 0..warmup {
        model.predict(&image)?;
    }
    let mut samples_ms = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t = Instant::now();
        std::hint::black_box(model.predict(&image)?);
        samples_ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let n = samples_ms.len() as f64;
    let mean_ms = samples_ms.iter().sum::<f64>() / n;
    let std_ms = (samples_ms.iter().map(|v| (v - mean_ms).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    Ok(BenchReport { parameters: model.count_parameters(), input_size: s, warmup, samples_ms, mean_ms, std_ms })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn report_counts_parameters() {
        let cfg = ModelConfig { levels: 2, channels: vec![2, 4], recurrence: vec![1, 1], input_size: 16, ..ModelConfig::desk() };
        let model = Model::<f32>::build(&cfg).unwrap();
        let r = bench_forward(&model, 1, 3).unwrap();
        assert_eq!(r.parameters, model.count_parameters());
        assert_eq!(r.samples_ms.len(), 3);
        assert!(r.mean_ms > 0.0);
        assert!(bench_forward(&model, 0, 1).is_err());
    }
}
