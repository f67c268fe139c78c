use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::LayerGraph;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Timing of one benchmark run (batch 1, forward only).
#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    pub shape: [usize; 4],
    pub latencies_s: Vec<f64>,
    pub mean_latency_s: f64,
    pub fps: f64,
    /// Sample standard deviation over mean of the per-iteration latencies.
    pub cv: f64,
    pub hardware: String,
}

/// Mean and sample coefficient of variation.
pub fn mean_cv(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 || mean == 0.0 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt() / mean)
}

/// Architecture, OS, worker threads and CPU model where available.
pub fn hardware_description() -> String {
    let threads = rayon::current_num_threads();
    let cpu = std::fs::read_to_string("/proc/cpuinfo").ok().and_then(|s| {
        s.lines()
            .find(|l| l.starts_with("model name"))
            .and_then(|l| l.split(':').nth(1))
            .map(|m| m.trim().to_string())
    });
    format!(
        "{} {}, {} threads, cpu: {}",
        std::env::consts::ARCH,
        std::env::consts::OS,
        threads,
        cpu.unwrap_or_else(|| "unknown".into())
    )
}

/// Time `iters` forward passes after `warmup` untimed ones on a fixed
/// pseudo-random input of `shape` (batch must be 1).
pub fn fps_benchmark(graph: &LayerGraph, shape: [usize; 4], warmup: usize, iters: usize) -> Result<BenchResult> {
    if warmup < 1 || iters < 5 {
        return Err(Error::Param(format!("need warmup >= 1 and iters >= 5, got {warmup} and {iters}")));
    }
    if shape[0] != 1 {
        return Err(Error::Param(format!("throughput is measured at batch 1, got {}", shape[0])));
    }
    let x = Tensor::rand_uniform(shape, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
    for _ in 0..warmup {
        graph.predict(&x)?;
    }
    let mut latencies_s = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t = Instant::now();
        let out = graph.predict(&x)?;
        latencies_s.push(t.elapsed().as_secs_f64());
        std::hint::black_box(out);
    }
    let (mean, cv) = mean_cv(&latencies_s);
    Ok(BenchResult {
        shape,
        latencies_s,
        mean_latency_s: mean,
        fps: 1.0 / mean,
        cv,
        hardware: hardware_description(),
    })
}

/// Several independent runs; the spread is the CV of the run means.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchSummary {
    pub runs: Vec<BenchResult>,
    pub mean_latency_s: f64,
    pub fps: f64,
    pub cv_of_means: f64,
}

pub fn benchmark_runs(graph: &LayerGraph, shape: [usize; 4], warmup: usize, iters: usize, runs: usize) -> Result<BenchSummary> {
    if runs == 0 {
        return Err(Error::Param("need at least one run".into()));
    }
    let runs: Vec<BenchResult> = (0..runs)
        .map(|_| fps_benchmark(graph, shape, warmup, iters))
        .collect::<Result<_>>()?;
    let means: Vec<f64> = runs.iter().map(|r| r.mean_latency_s).collect();
    let (mean, cv) = mean_cv(&means);
    Ok(BenchSummary {
        runs,
        mean_latency_s: mean,
        fps: 1.0 / mean,
        cv_of_means: cv,
    })
}
