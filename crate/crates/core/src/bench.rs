//! Batch-1 forward latency.

use std::fmt::Write as _;
use std::time::Instant;

use crate::analysis::{count_flops, count_params};
use crate::data::Prng;
use crate::error::{Error, Result};
use crate::metrics::mean_stdev;
use crate::model::{predict, ArchitectureSpec, ParameterStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Stats {
    pub mean: f64,
    pub stdev: f64,
    pub min: f64,
    pub max: f64,
}

/// Mean, sample standard deviation, min and max.
pub fn stats(samples: &[f64]) -> Result<Stats> {
    let s = mean_stdev(samples).map_err(|_| Error::InvalidArgument("no samples".into()))?;
    let min = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let max = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(Stats { mean: s.mean, stdev: s.stdev, min, max })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub arch: String,
    pub height: usize,
    pub width: usize,
    pub warmup: usize,
    /// Timed iterations in milliseconds, quantised to whole microseconds.
    pub samples_ms: Vec<f64>,
    pub stats: Stats,
    /// Images per second at the mean latency.
    pub throughput: f64,
    pub threads: usize,
    pub machine: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchConfig {
    pub iters: usize,
    pub warmup: usize,
    pub height: usize,
    pub width: usize,
    /// Seed of the fixed random input.
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { iters: 100, warmup: 10, height: 256, width: 256, seed: 0 }
    }
}

pub fn machine_descriptor() -> String {
    format!(
        "{}-{} cpus={} threads={}",
        std::env::consts::ARCH,
        std::env::consts::OS,
        std::thread::available_parallelism().map_or(1, |n| n.get()),
        rayon::current_num_threads()
    )
}

/// Times `iters` tape-free forward passes on one fixed `(1, C, H, W)` input
/// after `warmup` untimed passes. Returns the report and the last output.
pub fn bench_forward(
    spec: &ArchitectureSpec,
    params: &ParameterStore<f32>,
    cfg: &BenchConfig,
) -> Result<(BenchReport, Tensor<f32>)> {
    if cfg.iters == 0 {
        return Err(Error::InvalidArgument("iters must be >= 1".into()));
    }
    let dims = [1, spec.input_channels(), cfg.height, cfg.width];
    let mut rng = Prng::new(cfg.seed);
    let n: usize = dims.iter().product();
    let x = Tensor::from_values(&dims, (0..n).map(|_| rng.next_f64() as f32).collect())?;
    let cost = count_flops(spec, cfg.height, cfg.width)?;

    for _ in 0..cfg.warmup {
        predict(spec, params, &x)?;
    }
    let mut samples_ms = Vec::with_capacity(cfg.iters);
    let mut y = None;
    for _ in 0..cfg.iters {
        let t0 = Instant::now();
        let out = predict(spec, params, &x)?;
        let us = t0.elapsed().as_micros();
        samples_ms.push(us as f64 / 1000.0);
        y = Some(out);
    }
    let y = y.expect("iters >= 1");
    let stats = stats(&samples_ms)?;
    let report = BenchReport {
        arch: spec.id().to_string(),
        height: cfg.height,
        width: cfg.width,
        warmup: cfg.warmup,
        throughput: 1000.0 / stats.mean,
        stats,
        samples_ms,
        threads: rayon::current_num_threads(),
        machine: machine_descriptor(),
        params: count_params(spec),
        flops: cost.total_flops,
    };
    Ok((report, y))
}

impl BenchReport {
    /// `iter\tms` rows (3 decimals) then
    /// `SUMMARY\tmean\tstd\tmin\tmax\tthroughput`.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("iter\tms\n");
        for (i, ms) in self.samples_ms.iter().enumerate() {
            let _ = writeln!(s, "{i}\t{ms:.3}");
        }
        let st = &self.stats;
        let _ = writeln!(
            s,
            "SUMMARY\t{:.12}\t{:.12}\t{:.3}\t{:.3}\t{:.6}",
            st.mean, st.stdev, st.min, st.max, self.throughput
        );
        s
    }

    pub fn to_text(&self) -> String {
        let st = &self.stats;
        format!(
            "{} @ 1x{}x{} batch 1, {} timed / {} warmup, {}\n\
             latency {:.3} ± {:.3} ms (min {:.3}, max {:.3}), {:.2} images/s\n\
             {} params, {:.3} GFLOPs per image; CPU timings are not comparable to GPU figures\n",
            self.arch,
            self.height,
            self.width,
            self.samples_ms.len(),
            self.warmup,
            self.machine,
            st.mean,
            st.stdev,
            st.min,
            st.max,
            self.throughput,
            self.params,
            self.flops as f64 / 1e9
        )
    }
}

/// Re-reads the rows of [`BenchReport::to_tsv`] and returns the samples and
/// the recorded `(mean, stdev)`.
pub fn parse_bench_tsv(text: &str) -> Result<(Vec<f64>, f64, f64)> {
    let mut lines = text.lines();
    if lines.next() != Some("iter\tms") {
        return Err(Error::format("bench TSV header missing"));
    }
    let mut samples = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split('\t').collect();
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::format(format!("bad number in {line:?}")));
        if f.first() == Some(&"SUMMARY") {
            if f.len() != 6 {
                return Err(Error::format("SUMMARY needs 5 values"));
            }
            return Ok((samples, num(f[1])?, num(f[2])?));
        }
        if f.len() != 2 {
            return Err(Error::format(format!("bad bench row {line:?}")));
        }
        samples.push(num(f[1])?);
    }
    Err(Error::format("bench TSV has no SUMMARY row"))
}
