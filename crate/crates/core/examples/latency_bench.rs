//! Batch-1 forward latency with seeded random weights.
//!
//! ```text
//! cargo run --release --example latency_bench -- [SIZE] [ITERS]
//! ```

use rfbsnet::bench::{bench_forward, BenchConfig};
use rfbsnet::model::{build_rfbsnet_desk, init_params};

fn main() -> rfbsnet::Result<()> {
    let mut args = std::env::args().skip(1);
    let size: usize = args.next().map_or(256, |s| s.parse().expect("SIZE must be an integer"));
    let iters: usize = args.next().map_or(20, |s| s.parse().expect("ITERS must be an integer"));

    let spec = build_rfbsnet_desk(1, 2)?;
    let params = init_params(&spec, 42);
    let cfg = BenchConfig { iters, warmup: 3, height: size, width: size, ..BenchConfig::default() };
    let (report, _) = bench_forward(&spec, &params, &cfg)?;
    print!("{}", report.to_text());
    Ok(())
}
