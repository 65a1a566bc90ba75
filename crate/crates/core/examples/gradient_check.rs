//! Central-difference checks of every layer primitive and of the whole
//! network in f64.

use rfbsnet::model::{build_rfbsnet_desk, network_grad_check};
use rfbsnet::ops::gradcheck::{op_suite, GradCheckConfig};

fn main() -> rfbsnet::Result<()> {
    for report in op_suite(1e-6, false)? {
        println!("{report}");
    }
    let spec = build_rfbsnet_desk(1, 2)?;
    let cfg = GradCheckConfig { tolerance: 1e-5, max_coords: Some(6), ..GradCheckConfig::default() };
    let net = network_grad_check(&spec, &[1, 1, 16, 16], 42, &cfg)?;
    println!("{net}");

    // A corrupted weight gradient has to be caught.
    let broken = op_suite(1e-6, true)?;
    let caught = broken.iter().filter(|r| r.op.starts_with("conv2d") && !r.pass).count();
    println!("perturbed conv gradients rejected: {caught}/3");
    Ok(())
}
