//! Synthetic ellipse phantoms with analytically known masks.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Dataset, Prng, Sample};

const MASK_INTENSITY: f64 = 0.7;
const NOISE_AMPLITUDE: f64 = 0.05;

/// Geometry drawn for one phantom.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub center: (f64, f64),
    pub semi_axes: (f64, f64),
    /// Rotation in `[0, π)`.
    pub angle: f64,
}

impl Ellipse {
    /// Whether point `(x, y)` lies inside or on the boundary.
    pub fn contains(&self, x: f64, y: f64, cos: f64, sin: f64) -> bool {
        let dx = x - self.center.0;
        let dy = y - self.center.1;
        let u = dx * cos + dy * sin;
        let v = -dx * sin + dy * cos;
        let (a, b) = self.semi_axes;
        (u / a) * (u / a) + (v / b) * (v / b) <= 1.0
    }
}

/// `(sin θ, cos θ)` for `θ ∈ [0, π)` from a fixed Taylor expansion, so results
/// are reproducible without relying on the platform libm.
pub fn portable_sin_cos(theta: f64) -> (f64, f64) {
    // Expand around π/2 so the argument stays within [−π/2, π/2].
    let x = theta - std::f64::consts::FRAC_PI_2;
    let x2 = x * x;
    let (mut s, mut c) = (0.0, 0.0);
    let (mut ts, mut tc) = (x, 1.0);
    for k in 1..=15u32 {
        s += ts;
        c += tc;
        let k = k as f64;
        ts *= -x2 / ((2.0 * k) * (2.0 * k + 1.0));
        tc *= -x2 / ((2.0 * k - 1.0) * (2.0 * k));
    }
    // sin(x + π/2) = cos x, cos(x + π/2) = −sin x
    (c, -s)
}

/// Renders one phantom from its own PRNG stream.
pub fn render_phantom(size: usize, stream_seed: u64) -> (Tensor<f32>, Tensor<f32>, Ellipse) {
    let mut rng = Prng::new(stream_seed);
    let s = size as f64;
    let ellipse = Ellipse {
        center: (rng.uniform(s / 4.0, 3.0 * s / 4.0), rng.uniform(s / 4.0, 3.0 * s / 4.0)),
        semi_axes: (rng.uniform(s / 8.0, s / 4.0), rng.uniform(s / 8.0, s / 4.0)),
        angle: rng.uniform(0.0, std::f64::consts::PI),
    };
    let (gx, gy) = (rng.next_f64(), rng.next_f64());
    let (sin, cos) = portable_sin_cos(ellipse.angle);
    let mut image = Vec::with_capacity(size * size);
    let mut mask = Vec::with_capacity(size * size);
    for py in 0..size {
        for px in 0..size {
            let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
            let inside = ellipse.contains(x, y, cos, sin);
            let m = if inside { 1.0 } else { 0.0 };
            let background = 0.1 + 0.1 * (gx * x + gy * y) / s;
            let noise = NOISE_AMPLITUDE * (2.0 * rng.next_unit_u64() - 1.0);
            let v = (MASK_INTENSITY * m + background + noise).clamp(0.0, 1.0);
            image.push(v as f32);
            mask.push(m as f32);
        }
    }
    (
        Tensor::from_values(&[1, size, size], image).expect("positive size"),
        Tensor::from_values(&[size, size], mask).expect("positive size"),
        ellipse,
    )
}

/// `n` phantoms of `size × size`; sample `i` draws from stream `seed ⊕ i`.
/// Every sample starts out assigned to the training split.
pub fn generate_phantoms(n: usize, size: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("phantom count must be at least 1".into()));
    }
    if size < 64 || !size.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("phantom size must be even and >= 64, got {size}")));
    }
    let samples = (0..n)
        .map(|i| {
            let (image, mask, _) = render_phantom(size, seed ^ i as u64);
            Sample::new(format!("{i:04}"), image, mask)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(samples))
}
