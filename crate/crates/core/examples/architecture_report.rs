//! Per-layer shapes, parameters and FLOPs of the built-in architectures.
//!
//! ```text
//! cargo run --example architecture_report -- [SIZE]
//! ```

use rfbsnet::analysis::{count_flops, count_params};
use rfbsnet::model::{build_by_id, init_params, known_arch_ids};

fn main() -> rfbsnet::Result<()> {
    let size: usize = std::env::args().nth(1).map_or(256, |s| s.parse().expect("SIZE must be an integer"));
    let desk = build_by_id(known_arch_ids()[0])?;
    print!("{}", count_flops(&desk, size, size)?.to_table());

    println!();
    for id in known_arch_ids() {
        let spec = build_by_id(id)?;
        let stored = init_params::<f32>(&spec, 0).total_elements();
        let report = count_flops(&spec, size, size)?;
        println!(
            "{id:<26} params {:>8} (store {stored})  {:>6.3} GFLOPs  hash {:#010x}",
            count_params(&spec),
            report.total_flops as f64 / 1e9,
            spec.config_hash()
        );
    }
    Ok(())
}
