//! Single-image forward latency.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::zoo::{ArchName, CountConvention, NetworkModel};

pub const WARMUP_ITERS: usize = 3;

/// Reference numbers measured on a single core of an i7-4790.
pub const REFERENCE_CONTEXT: &str = "paper: A=71ms, B=67ms, single core i7-4790";

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub arch: ArchName,
    pub iters: usize,
    pub mean_ms: f64,
    pub min_ms: f64,
    pub compact_params: u64,
    pub true_params: u64,
}

impl BenchReport {
    pub fn to_text(&self) -> String {
        format!(
            "arch={}\niters={}\nmean_ms={:.3}\nmin_ms={:.3}\nparams_compact={}\nparams_true={}\n{}\n",
            self.arch, self.iters, self.mean_ms, self.min_ms, self.compact_params, self.true_params, REFERENCE_CONTEXT
        )
    }
}

/// Times `iters` single-image evaluation passes after [`WARMUP_ITERS`]
/// untimed ones, on the calling thread.
pub fn run(model: &NetworkModel<f32>, iters: usize, seed: u64) -> Result<BenchReport> {
    if iters == 0 {
        return Err(Error::invalid("bench", "iters must be at least 1"));
    }
    let mut rng = Rng::new(seed);
    let input = Tensor::from_fn(model.input_shape(1), |_, _, _, _| rng.uniform() as f32);
    for _ in 0..WARMUP_ITERS {
        model.infer(&input)?;
    }
    let mut times = Vec::with_capacity(iters);
    for _ in 0..iters {
        let start = Instant::now();
        std::hint::black_box(model.infer(std::hint::black_box(&input))?);
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(BenchReport {
        arch: model.config().arch,
        iters,
        mean_ms: times.iter().sum::<f64>() / iters as f64,
        min_ms: times.iter().copied().fold(f64::INFINITY, f64::min),
        compact_params: model.count_parameters(CountConvention::Compact).total,
        true_params: model.count_parameters(CountConvention::True).total,
    })
}
