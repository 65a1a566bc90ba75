//! Dice and IoU of predicted masks, from a checkpoint or from shifted
//! ground truth when none is given.
//!
//! ```text
//! cargo run --release --example evaluate_masks -- [CKPT]
//! ```

use rfbsnet::data::{generate_phantoms, stack_samples};
use rfbsnet::metrics::{aggregate, argmax_mask, confusion, ImageScore};
use rfbsnet::model::{load_checkpoint, predict};
use rfbsnet::Tensor;

/// The mask moved right by `dx` pixels.
fn shifted(mask: &Tensor<f32>, dx: usize) -> Tensor<f32> {
    let (h, w) = (mask.dims()[0], mask.dims()[1]);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in dx..w {
            out[y * w + x] = mask.data()[y * w + x - dx];
        }
    }
    Tensor::from_values(&[h, w], out).expect("same shape")
}

fn main() -> rfbsnet::Result<()> {
    let ckpt = std::env::args().nth(1);
    let data = generate_phantoms(8, 256, 7)?;
    let mut scores = Vec::new();
    match ckpt {
        Some(path) => {
            let (spec, params) = load_checkpoint::<f32>(path.as_ref())?;
            let idx: Vec<usize> = (0..data.len()).collect();
            let batch = stack_samples(&data, &idx)?;
            let masks = argmax_mask(&predict(&spec, &params, &batch.images)?, 1)?;
            let plane = 256 * 256;
            for (i, s) in data.samples().iter().enumerate() {
                let p = Tensor::from_values(&[256, 256], masks.data()[i * plane..(i + 1) * plane].to_vec())?;
                scores.push(ImageScore::new(s.id.clone(), confusion(&p, &s.mask)?));
            }
        }
        None => {
            for (i, s) in data.samples().iter().enumerate() {
                let p = shifted(&s.mask, 2 * i);
                scores.push(ImageScore::new(format!("{} shift {}", s.id, 2 * i), confusion(&p, &s.mask)?));
            }
        }
    }
    let report = aggregate(scores)?;
    print!("{}", report.to_tsv());
    println!("{}", report.summary_line());
    Ok(())
}
