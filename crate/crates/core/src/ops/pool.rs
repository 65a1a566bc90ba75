use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// Winning input position of every output element of a 2×2 max-pool.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndices {
    input_shape: Shape,
    output_shape: Shape,
    /// Flat index into the input buffer, one per output element.
    indices: Vec<usize>,
}

impl PoolIndices {
    pub fn input_shape(&self) -> &Shape {
        &self.input_shape
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

/// Non-overlapping 2×2 max-pool with stride 2. Ties resolve to the first
/// element of the window in row-major order.
pub fn maxpool2x2<T: Element>(x: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices)> {
    let (n, c, h, w) = x.shape().nchw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("max-pool 2x2 needs even H and W, got {}", x.shape())));
    }
    let (ho, wo) = (h / 2, w / 2);
    let src = x.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut indices = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let top = base + 2 * i * w + 2 * j;
                let window = [top, top + 1, top + w, top + w + 1];
                let mut best = window[0];
                for &idx in &window[1..] {
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                out.push(src[best]);
                indices.push(best);
            }
        }
    }
    let output_shape = Shape::new(&[n, c, ho, wo])?;
    let y = Tensor::from_parts(output_shape.clone(), out);
    Ok((y, PoolIndices { input_shape: x.shape().clone(), output_shape, indices }))
}

/// Routes each upstream value to the recorded argmax position.
pub fn maxpool2x2_vjp<T: Element>(argmax: &PoolIndices, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    if upstream.shape() != &argmax.output_shape {
        return Err(Error::shape(format!(
            "max-pool upstream {} does not match output {}",
            upstream.shape(),
            argmax.output_shape
        )));
    }
    let mut dx = Tensor::zeros_like_shape(&argmax.input_shape);
    let buf = dx.data_mut();
    for (&idx, &g) in argmax.indices.iter().zip(upstream.data()) {
        buf[idx] = buf[idx] + g;
    }
    Ok(dx)
}
