//! Writes a small phantom dataset (PGM images, masks and a manifest).
//!
//! ```text
//! cargo run --example generate_phantoms -- OUT_DIR [N] [SIZE]
//! ```

use std::path::PathBuf;

use rfbsnet::data::{generate_phantoms, save_dataset, split, Split};

fn main() -> rfbsnet::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().map_or_else(|| std::env::temp_dir().join("phantoms"), PathBuf::from);
    let n: usize = args.next().map_or(16, |s| s.parse().expect("N must be an integer"));
    let size: usize = args.next().map_or(128, |s| s.parse().expect("SIZE must be an integer"));

    let data = split(generate_phantoms(n, size, 42)?, 0.8, 42)?;
    save_dataset(&out, &data)?;
    for s in data.samples().iter().take(4) {
        let fg = s.mask.data().iter().filter(|&&v| v == 1.0).count();
        println!("{}  foreground {:.1}%", s.id, 100.0 * fg as f64 / s.mask.len() as f64);
    }
    println!(
        "{} train / {} val -> {}",
        data.indices(Split::Train).len(),
        data.indices(Split::Val).len(),
        out.display()
    );
    Ok(())
}
