//! ReLU, channel softmax, nearest-neighbour upsampling and spatial cropping.

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `upstream` where `x > 0`; the gradient at exactly 0 is 0.
pub fn relu_vjp<T: Element>(x: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != upstream.shape() {
        return Err(Error::shape(format!("relu upstream {} does not match input {}", upstream.shape(), x.shape())));
    }
    let data = x.data().iter().zip(upstream.data()).map(|(&v, &g)| if v > T::zero() { g } else { T::zero() }).collect();
    Ok(Tensor::from_parts(x.shape().clone(), data))
}

/// Per-pixel softmax over the channel axis of an NCHW tensor, stabilised by
/// subtracting the per-pixel maximum.
pub fn softmax_channels<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.shape().nchw()?;
    let plane = h * w;
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    let mut exps = vec![T::zero(); c];
    for b in 0..n {
        let base = b * c * plane;
        for px in 0..plane {
            let mut max = src[base + px];
            for ch in 1..c {
                let v = src[base + ch * plane + px];
                if v > max {
                    max = v;
                }
            }
            let mut total = T::zero();
            for (ch, e) in exps.iter_mut().enumerate() {
                *e = (src[base + ch * plane + px] - max).exp();
                total = total + *e;
            }
            for (ch, &e) in exps.iter().enumerate() {
                out[base + ch * plane + px] = e / total;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().clone(), out))
}

/// Input gradient of softmax given its output `y`:
/// `dx_c = y_c · (g_c − Σ_k g_k y_k)`.
pub fn softmax_channels_vjp<T: Element>(y: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    if y.shape() != upstream.shape() {
        return Err(Error::shape(format!("softmax upstream {} does not match output {}", upstream.shape(), y.shape())));
    }
    let (n, c, h, w) = y.shape().nchw()?;
    let plane = h * w;
    let (yd, gd) = (y.data(), upstream.data());
    let mut out = vec![T::zero(); yd.len()];
    for b in 0..n {
        let base = b * c * plane;
        for px in 0..plane {
            let mut inner = T::zero();
            for ch in 0..c {
                let i = base + ch * plane + px;
                inner = inner + gd[i] * yd[i];
            }
            for ch in 0..c {
                let i = base + ch * plane + px;
                out[i] = yd[i] * (gd[i] - inner);
            }
        }
    }
    Ok(Tensor::from_parts(y.shape().clone(), out))
}

/// Replicates every pixel into a 2×2 block: `(N, C, H, W) -> (N, C, 2H, 2W)`.
pub fn nearest_upsample2x<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.shape().nchw()?;
    let wo = 2 * w;
    let src = x.data();
    let mut out = Vec::with_capacity(src.len() * 4);
    for plane in 0..n * c {
        for i in 0..h {
            let row = &src[(plane * h + i) * w..(plane * h + i + 1) * w];
            let start = out.len();
            for &v in row {
                out.push(v);
                out.push(v);
            }
            out.extend_from_within(start..start + wo);
        }
    }
    Ok(Tensor::from_parts(Shape::new(&[n, c, 2 * h, 2 * w])?, out))
}

/// Adjoint of [`nearest_upsample2x`]: sums each 2×2 upstream block.
pub fn nearest_upsample2x_vjp<T: Element>(upstream: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h2, w2) = upstream.shape().nchw()?;
    if h2 % 2 != 0 || w2 % 2 != 0 {
        return Err(Error::shape(format!("upsample upstream {} has odd spatial extent", upstream.shape())));
    }
    let (h, w) = (h2 / 2, w2 / 2);
    let g = upstream.data();
    let mut out = Vec::with_capacity(g.len() / 4);
    for plane in 0..n * c {
        let base = plane * h2 * w2;
        for i in 0..h {
            for j in 0..w {
                let top = base + 2 * i * w2 + 2 * j;
                out.push(g[top] + g[top + 1] + g[top + w2] + g[top + w2 + 1]);
            }
        }
    }
    Ok(Tensor::from_parts(Shape::new(&[n, c, h, w])?, out))
}

/// Keeps the top-left `h × w` region of every plane.
pub fn crop_spatial<T: Element>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (n, c, hi, wi) = x.shape().nchw()?;
    if h == 0 || w == 0 || h > hi || w > wi {
        return Err(Error::shape(format!("cannot crop {} to {h}x{w}", x.shape())));
    }
    if (h, w) == (hi, wi) {
        return Ok(x.clone());
    }
    let src = x.data();
    let mut out = Vec::with_capacity(n * c * h * w);
    for plane in 0..n * c {
        for i in 0..h {
            let start = (plane * hi + i) * wi;
            out.extend_from_slice(&src[start..start + w]);
        }
    }
    Ok(Tensor::from_parts(Shape::new(&[n, c, h, w])?, out))
}

/// Adjoint of [`crop_spatial`]: zero-pads the upstream back to `input_shape`.
pub fn crop_spatial_vjp<T: Element>(input_shape: &Shape, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, hi, wi) = input_shape.nchw()?;
    let (nu, cu, h, w) = upstream.shape().nchw()?;
    if (nu, cu) != (n, c) || h > hi || w > wi {
        return Err(Error::shape(format!("crop upstream {} incompatible with input {input_shape}", upstream.shape())));
    }
    if (h, w) == (hi, wi) {
        return Ok(upstream.clone());
    }
    let mut dx = Tensor::zeros_like_shape(input_shape);
    let buf = dx.data_mut();
    for plane in 0..n * c {
        for i in 0..h {
            let dst = (plane * hi + i) * wi;
            let src = (plane * h + i) * w;
            buf[dst..dst + w].copy_from_slice(&upstream.data()[src..src + w]);
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Prng;
    use crate::ops::gradcheck::{grad_check, GradCheckConfig};
    use proptest::prelude::*;

    fn t(dims: &[usize], v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_values(dims, v).unwrap()
    }

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn relu_examples() {
        assert_eq!(relu(&t(&[3], vec![-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
        let g = relu_vjp(&t(&[2], vec![-1.0, 2.0]), &t(&[2], vec![5.0, 5.0])).unwrap();
        assert_eq!(g.data(), &[0.0, 5.0]);
        assert_eq!(relu_vjp(&t(&[1], vec![0.0]), &t(&[1], vec![3.0])).unwrap().data(), &[0.0]);
    }

    #[test]
    fn relu_gradient_away_from_kink() {
        let mut rng = Prng::new(9);
        let x = t(
            &[1, 2, 3, 3],
            (0..18)
                .map(|_| {
                    let v = rng.uniform(0.1, 1.0);
                    if rng.next_u64().is_multiple_of(2) {
                        v
                    } else {
                        -v
                    }
                })
                .collect(),
        );
        let up = t(&[1, 2, 3, 3], (0..18).map(|_| rng.uniform(-1.0, 1.0)).collect());
        let dx = relu_vjp(&x, &up).unwrap();
        let report =
            grad_check("relu", &[("x", x)], &[dx], |v| Ok(dot(&relu(&v[0]), &up)), &GradCheckConfig::default())
                .unwrap();
        assert!(report.pass, "{report}");
    }

    #[test]
    fn softmax_examples() {
        let y = softmax_channels(&t(&[1, 2, 1, 1], vec![0.0, 0.0])).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
        let y = softmax_channels(&t(&[1, 2, 1, 1], vec![2f64.ln(), 0.0])).unwrap();
        assert!((y.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((y.data()[1] - 1.0 / 3.0).abs() < 1e-15);
        let y = softmax_channels(&Tensor::<f32>::from_values(&[1, 2, 1, 1], vec![1000.0, 1000.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_gradient() {
        let mut rng = Prng::new(4);
        let x = t(&[2, 3, 2, 2], (0..24).map(|_| rng.uniform(-2.0, 2.0)).collect());
        let up = t(&[2, 3, 2, 2], (0..24).map(|_| rng.uniform(-1.0, 1.0)).collect());
        let y = softmax_channels(&x).unwrap();
        let dx = softmax_channels_vjp(&y, &up).unwrap();
        let report = grad_check(
            "softmax_channels",
            &[("x", x)],
            &[dx],
            |v| Ok(dot(&softmax_channels(&v[0])?, &up)),
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.pass, "{report}");
    }

    #[test]
    fn upsample_examples() {
        assert_eq!(nearest_upsample2x(&t(&[1, 1, 1, 1], vec![1.0])).unwrap().data(), &[1.0; 4]);
        let y = nearest_upsample2x(&t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]);
        let g = nearest_upsample2x_vjp(&t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(g.data(), &[10.0]);
    }

    #[test]
    fn upsample_and_crop_gradients() {
        let mut rng = Prng::new(8);
        let x = t(&[1, 2, 3, 2], (0..12).map(|_| rng.uniform(-1.0, 1.0)).collect());
        let up = t(&[1, 2, 6, 4], (0..48).map(|_| rng.uniform(-1.0, 1.0)).collect());
        let dx = nearest_upsample2x_vjp(&up).unwrap();
        let r = grad_check(
            "upsample",
            &[("x", x.clone())],
            &[dx],
            |v| Ok(dot(&nearest_upsample2x(&v[0])?, &up)),
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(r.pass, "{r}");

        let cup = t(&[1, 2, 2, 1], (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect());
        let dx = crop_spatial_vjp(x.shape(), &cup).unwrap();
        let r = grad_check(
            "crop",
            &[("x", x)],
            &[dx],
            |v| Ok(dot(&crop_spatial(&v[0], 2, 1)?, &cup)),
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(r.pass, "{r}");
    }

    #[test]
    fn crop_examples() {
        let x = t(&[1, 1, 3, 3], (1..=9).map(f64::from).collect());
        assert_eq!(crop_spatial(&x, 2, 2).unwrap().data(), &[1.0, 2.0, 4.0, 5.0]);
        assert_eq!(crop_spatial(&x, 3, 3).unwrap(), x);
        assert!(crop_spatial(&x, 4, 3).is_err());
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(v in proptest::collection::vec(-50f32..50.0, 24)) {
            let y = softmax_channels(&Tensor::from_values(&[2, 3, 2, 2], v).unwrap()).unwrap();
            for b in 0..2 {
                for px in 0..4 {
                    let s: f32 = (0..3).map(|c| y.data()[b * 12 + c * 4 + px]).sum();
                    prop_assert!((s - 1.0).abs() <= 1e-6);
                }
            }
            prop_assert!(y.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        }

        #[test]
        fn upsample_shape_law(n in 1usize..3, c in 1usize..3, h in 1usize..9, w in 1usize..9) {
            let y = nearest_upsample2x(&Tensor::<f32>::zeros(&[n, c, h, w]).unwrap()).unwrap();
            prop_assert_eq!(y.dims(), &[n, c, 2 * h, 2 * w][..]);
        }
    }
}
