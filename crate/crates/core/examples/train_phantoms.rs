//! Trains the desk model on synthetic phantoms and saves the best checkpoint.
//!
//! ```text
//! cargo run --release --example train_phantoms -- [N] [EPOCHS] [OUT.rfbc]
//! ```

use std::path::PathBuf;

use rfbsnet::data::{generate_phantoms, split};
use rfbsnet::model::{build_rfbsnet_desk, save_checkpoint};
use rfbsnet::training::{train, TrainConfig, DESK_EPOCHS};

fn main() -> rfbsnet::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map_or(200, |s| s.parse().expect("N must be an integer"));
    let epochs: usize = args.next().map_or(DESK_EPOCHS, |s| s.parse().expect("EPOCHS must be an integer"));
    let out = args.next().map_or_else(|| std::env::temp_dir().join("phantoms.rfbc"), PathBuf::from);

    let cfg = TrainConfig { epochs, ..TrainConfig::default() };
    let data = split(generate_phantoms(n, cfg.input_size, cfg.seed)?, 0.8, cfg.seed)?;
    let spec = build_rfbsnet_desk(1, 2)?;

    let (params, log) = train(&spec, &data, &cfg, |e| {
        let dice = e.val_dice.map_or("-".to_string(), |d| format!("{d:.4}"));
        println!("epoch {:>3}  loss {:.4}  val dice {dice}  ({:.1}s)", e.epoch, e.train_loss, e.seconds);
    })?;
    save_checkpoint(&out, &spec, &params)?;
    println!(
        "best epoch {} (val dice {:.4}) -> {}",
        log.best_epoch,
        log.best_val_dice().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}
