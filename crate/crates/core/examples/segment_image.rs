//! Segments one PGM image and writes the mask as a {0, 255} PGM.
//!
//! Without arguments a phantom is rendered and segmented by a model
//! trained for a few steps in-process.
//!
//! ```text
//! cargo run --release --example segment_image -- CKPT IN.pgm OUT.pgm
//! ```

use rfbsnet::data::{generate_phantoms, read_pgm, render_phantom, split, write_pgm};
use rfbsnet::metrics::{argmax_mask, confusion, dice};
use rfbsnet::model::{build_rfbsnet_desk, load_checkpoint, predict};
use rfbsnet::training::{train, TrainConfig};

fn main() -> rfbsnet::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if let [ckpt, input, output] = args.as_slice() {
        let (spec, params) = load_checkpoint::<f32>(ckpt.as_ref())?;
        let img = read_pgm(input.as_ref())?;
        let (h, w) = (img.dims()[0], img.dims()[1]);
        let mask = argmax_mask(&predict(&spec, &params, &img.reshape(&[1, 1, h, w])?)?, 1)?;
        write_pgm(output.as_ref(), &mask)?;
        println!("{w}x{h} -> {output}");
        return Ok(());
    }

    let spec = build_rfbsnet_desk(1, 2)?;
    let cfg = TrainConfig { input_size: 64, epochs: 8, batch_size: 4, initial_lr: 1e-3, ..TrainConfig::default() };
    let data = split(generate_phantoms(24, 64, 1)?, 0.8, 1)?;
    let (params, _) = train(&spec, &data, &cfg, |e| println!("epoch {} loss {:.4}", e.epoch, e.train_loss))?;

    let (image, truth, _) = render_phantom(64, 999);
    let prob = predict(&spec, &params, &image.reshape(&[1, 1, 64, 64])?)?;
    let mask = argmax_mask(&prob, 1)?.reshape(&[64, 64])?;
    println!("held-out phantom dice {:.3}", dice(&confusion(&mask, &truth)?));
    let out = std::env::temp_dir().join("phantom_mask.pgm");
    write_pgm(&out, &mask)?;
    println!("mask -> {}", out.display());
    Ok(())
}
