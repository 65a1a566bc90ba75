//! Convolution (cross-correlation) and 2×2 stride-2 transposed convolution,
//! both lowered to im2col + GEMM per batch item.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// Weights and hyperparameters of a convolution.
///
/// For [`conv2d`] the weight is `(Cout, Cin, Kh, Kw)`. For
/// [`transposed_conv2d`] it is `(Cin, Cout, 2, 2)`, so the same tensor can
/// drive the adjoint `conv2d` with stride 2 directly.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dParams<T: Element = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl<T: Element> Conv2dParams<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>, stride: usize, padding: usize) -> Result<Self> {
        if weight.rank() != 4 {
            return Err(Error::shape(format!("conv weight must be rank 4, got {}", weight.shape())));
        }
        if bias.rank() != 1 {
            return Err(Error::shape(format!("conv bias must be rank 1, got {}", bias.shape())));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        Ok(Conv2dParams { weight, bias, stride: (stride, stride), padding: (padding, padding) })
    }

    pub fn kernel(&self) -> (usize, usize) {
        let d = self.weight.dims();
        (d[2], d[3])
    }
}

/// Kernel/stride/padding combinations the engine supports.
pub fn check_conv_config(kernel: (usize, usize), stride: (usize, usize), padding: (usize, usize)) -> Result<()> {
    let ok = matches!(
        (kernel, stride, padding),
        ((3, 3), (1, 1), (1, 1))
            | ((3, 3), (1, 1), (0, 0))
            | ((3, 3), (2, 2), (1, 1))
            | ((1, 1), (1, 1), (0, 0))
            | ((2, 2), (2, 2), (0, 0))
    );
    if ok {
        Ok(())
    } else {
        Err(Error::Unsupported(format!(
            "conv kernel {}x{} stride {}x{} padding {}x{} (supported: k3 s1/s2 p1, k3 s1 p0, k1 s1 p0, k2 s2 p0)",
            kernel.0, kernel.1, stride.0, stride.1, padding.0, padding.1
        )))
    }
}

/// Output extent of a convolution along one axis, if positive.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    hout: usize,
    wout: usize,
}

impl Geometry {
    fn conv(x: &Shape, p: &Conv2dParams<impl Element>) -> Result<Self> {
        let (n, cin, h, w) = x.nchw()?;
        let wd = p.weight.dims();
        let (cout, wcin, kh, kw) = (wd[0], wd[1], wd[2], wd[3]);
        if wcin != cin {
            return Err(Error::shape(format!("conv input has {cin} channels, weight expects {wcin}")));
        }
        if p.bias.len() != cout {
            return Err(Error::shape(format!("conv bias has {} entries for {cout} outputs", p.bias.len())));
        }
        check_conv_config((kh, kw), p.stride, p.padding)?;
        let (sh, sw) = p.stride;
        let (ph, pw) = p.padding;
        let hout = conv_out_extent(h, kh, sh, ph);
        let wout = conv_out_extent(w, kw, sw, pw);
        let (hout, wout) = match (hout, wout) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::shape(format!("conv output extent non-positive for input {x}"))),
        };
        Ok(Geometry { n, cin, h, w, cout, kh, kw, sh, sw, ph, pw, hout, wout })
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.hout * self.wout
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.ph == 0 && self.pw == 0
    }

    fn out_shape(&self) -> Shape {
        Shape::new(&[self.n, self.cout, self.hout, self.wout]).expect("positive extents")
    }
}

/// Unrolls one image `(Cin, H, W)` into `(Cin·Kh·Kw, Hout·Wout)` columns.
fn im2col<T: Element>(g: &Geometry, img: &[T], cols: &mut [T]) {
    let p = g.p();
    for c in 0..g.cin {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oi in 0..g.hout {
                    let ii = (oi * g.sh + ki) as isize - g.ph as isize;
                    let line = &mut dst[oi * g.wout..(oi + 1) * g.wout];
                    if ii < 0 || ii >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for (oj, v) in line.iter_mut().enumerate() {
                        let jj = (oj * g.sw + kj) as isize - g.pw as isize;
                        *v = if jj < 0 || jj >= g.w as isize { T::zero() } else { src[jj as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-adds columns back into an image; adjoint of [`im2col`].
fn col2im<T: Element>(g: &Geometry, cols: &[T], img: &mut [T]) {
    img.fill(T::zero());
    let p = g.p();
    for c in 0..g.cin {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oi in 0..g.hout {
                    let ii = (oi * g.sh + ki) as isize - g.ph as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for oj in 0..g.wout {
                        let jj = (oj * g.sw + kj) as isize - g.pw as isize;
                        if jj >= 0 && (jj as usize) < g.w {
                            line[jj as usize] = line[jj as usize] + src[oi * g.wout + oj];
                        }
                    }
                }
            }
        }
    }
}

fn add_bias_rows<T: Element>(out: &mut [T], bias: &[T], row_len: usize) {
    for (row, &b) in out.chunks_exact_mut(row_len).zip(bias) {
        for v in row {
            *v = *v + b;
        }
    }
}

fn sum_rows<T: Element>(m: &[T], row_len: usize) -> Vec<T> {
    m.chunks_exact(row_len).map(|r| r.iter().fold(T::zero(), |a, &v| a + v)).collect()
}

/// 2-D cross-correlation plus bias: `(N, Cin, H, W) -> (N, Cout, Hout, Wout)`.
pub fn conv2d<T: Element>(x: &Tensor<T>, p: &Conv2dParams<T>) -> Result<Tensor<T>> {
    let g = Geometry::conv(x.shape(), p)?;
    let (k, pp) = (g.k(), g.p());
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * pp;
    let mut out = vec![T::zero(); g.n * out_len];
    let weight = p.weight.data();
    out.par_chunks_mut(out_len).enumerate().for_each(|(i, dst)| {
        let img = &x.data()[i * in_len..(i + 1) * in_len];
        if g.is_pointwise() {
            T::gemm(g.cout, k, pp, weight, (k as isize, 1), img, (pp as isize, 1), dst, false);
        } else {
            let mut cols = vec![T::zero(); k * pp];
            im2col(&g, img, &mut cols);
            T::gemm(g.cout, k, pp, weight, (k as isize, 1), &cols, (pp as isize, 1), dst, false);
        }
        add_bias_rows(dst, p.bias.data(), pp);
    });
    Ok(Tensor::from_parts(g.out_shape(), out))
}

/// Gradients of `sum(upstream ⊙ conv2d(x, p))` with respect to the input,
/// weight and bias.
pub fn conv2d_vjp<T: Element>(
    x: &Tensor<T>,
    p: &Conv2dParams<T>,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = Geometry::conv(x.shape(), p)?;
    if upstream.shape() != &g.out_shape() {
        return Err(Error::shape(format!(
            "conv upstream {} does not match output {}",
            upstream.shape(),
            g.out_shape()
        )));
    }
    let (k, pp) = (g.k(), g.p());
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * pp;
    let weight = p.weight.data();
    let mut dx = vec![T::zero(); g.n * in_len];
    let partials: Vec<(Vec<T>, Vec<T>)> = dx
        .par_chunks_mut(in_len)
        .enumerate()
        .map(|(i, dx_img)| {
            let img = &x.data()[i * in_len..(i + 1) * in_len];
            let up = &upstream.data()[i * out_len..(i + 1) * out_len];
            let mut dw = vec![T::zero(); g.cout * k];
            if g.is_pointwise() {
                // dW = up · xᵀ ; dx = Wᵀ · up
                T::gemm(g.cout, pp, k, up, (pp as isize, 1), img, (1, pp as isize), &mut dw, false);
                T::gemm(k, g.cout, pp, weight, (1, k as isize), up, (pp as isize, 1), dx_img, false);
            } else {
                let mut cols = vec![T::zero(); k * pp];
                im2col(&g, img, &mut cols);
                T::gemm(g.cout, pp, k, up, (pp as isize, 1), &cols, (1, pp as isize), &mut dw, false);
                T::gemm(k, g.cout, pp, weight, (1, k as isize), up, (pp as isize, 1), &mut cols, false);
                col2im(&g, &cols, dx_img);
            }
            (dw, sum_rows(up, pp))
        })
        .collect();
    let (dw, db) = reduce_partials(partials, g.cout * k, g.cout);
    Ok((
        Tensor::from_parts(x.shape().clone(), dx),
        Tensor::from_parts(p.weight.shape().clone(), dw),
        Tensor::from_parts(p.bias.shape().clone(), db),
    ))
}

/// Sums per-image parameter gradients in batch order.
fn reduce_partials<T: Element>(partials: Vec<(Vec<T>, Vec<T>)>, wlen: usize, blen: usize) -> (Vec<T>, Vec<T>) {
    let mut dw = vec![T::zero(); wlen];
    let mut db = vec![T::zero(); blen];
    for (pw, pb) in partials {
        for (a, b) in dw.iter_mut().zip(pw) {
            *a = *a + b;
        }
        for (a, b) in db.iter_mut().zip(pb) {
            *a = *a + b;
        }
    }
    (dw, db)
}

#[derive(Clone, Copy, Debug)]
struct TGeometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
}

impl TGeometry {
    fn new(x: &Shape, p: &Conv2dParams<impl Element>) -> Result<Self> {
        let (n, cin, h, w) = x.nchw()?;
        let wd = p.weight.dims();
        if (wd[2], wd[3]) != (2, 2) || p.stride != (2, 2) || p.padding != (0, 0) {
            return Err(Error::Unsupported(format!(
                "transposed conv kernel {}x{} stride {:?} padding {:?} (only k2 s2 p0)",
                wd[2], wd[3], p.stride, p.padding
            )));
        }
        if wd[0] != cin {
            return Err(Error::shape(format!("transposed conv input has {cin} channels, weight expects {}", wd[0])));
        }
        let cout = wd[1];
        if p.bias.len() != cout {
            return Err(Error::shape(format!("transposed conv bias has {} entries for {cout} outputs", p.bias.len())));
        }
        Ok(TGeometry { n, cin, h, w, cout })
    }

    fn out_shape(&self) -> Shape {
        Shape::new(&[self.n, self.cout, 2 * self.h, 2 * self.w]).expect("positive extents")
    }
}

/// Learnable ×2 upsampling: each input pixel scatters `weight · x` into a
/// non-overlapping 2×2 output block. Weight layout `(Cin, Cout, 2, 2)`.
pub fn transposed_conv2d<T: Element>(x: &Tensor<T>, p: &Conv2dParams<T>) -> Result<Tensor<T>> {
    let g = TGeometry::new(x.shape(), p)?;
    let hw = g.h * g.w;
    let rows = g.cout * 4;
    let in_len = g.cin * hw;
    let out_len = g.cout * 4 * hw;
    let wo = 2 * g.w;
    let mut out = vec![T::zero(); g.n * out_len];
    out.par_chunks_mut(out_len).enumerate().for_each(|(i, dst)| {
        let img = &x.data()[i * in_len..(i + 1) * in_len];
        // blocks[(o·4 + a·2 + b), ij] = Σ_c W[c, o, a, b] · x[c, ij]
        let mut blocks = vec![T::zero(); rows * hw];
        T::gemm(rows, g.cin, hw, p.weight.data(), (1, rows as isize), img, (hw as isize, 1), &mut blocks, false);
        for o in 0..g.cout {
            let b = p.bias.data()[o];
            let plane = &mut dst[o * 4 * hw..(o + 1) * 4 * hw];
            for a in 0..2 {
                for bb in 0..2 {
                    let src = &blocks[(o * 4 + a * 2 + bb) * hw..(o * 4 + a * 2 + bb + 1) * hw];
                    for ii in 0..g.h {
                        for jj in 0..g.w {
                            plane[(2 * ii + a) * wo + 2 * jj + bb] = src[ii * g.w + jj] + b;
                        }
                    }
                }
            }
        }
    });
    Ok(Tensor::from_parts(g.out_shape(), out))
}

/// Gathers an upstream `(Cout, 2H, 2W)` image into `(Cout·4, H·W)` blocks.
fn gather_blocks<T: Element>(g: &TGeometry, up: &[T], blocks: &mut [T]) {
    let hw = g.h * g.w;
    let wo = 2 * g.w;
    for o in 0..g.cout {
        let plane = &up[o * 4 * hw..(o + 1) * 4 * hw];
        for a in 0..2 {
            for bb in 0..2 {
                let dst = &mut blocks[(o * 4 + a * 2 + bb) * hw..(o * 4 + a * 2 + bb + 1) * hw];
                for ii in 0..g.h {
                    for jj in 0..g.w {
                        dst[ii * g.w + jj] = plane[(2 * ii + a) * wo + 2 * jj + bb];
                    }
                }
            }
        }
    }
}

/// Gradients of `sum(upstream ⊙ transposed_conv2d(x, p))`.
pub fn transposed_conv2d_vjp<T: Element>(
    x: &Tensor<T>,
    p: &Conv2dParams<T>,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = TGeometry::new(x.shape(), p)?;
    if upstream.shape() != &g.out_shape() {
        return Err(Error::shape(format!(
            "transposed conv upstream {} does not match output {}",
            upstream.shape(),
            g.out_shape()
        )));
    }
    let hw = g.h * g.w;
    let rows = g.cout * 4;
    let in_len = g.cin * hw;
    let out_len = rows * hw;
    let mut dx = vec![T::zero(); g.n * in_len];
    let partials: Vec<(Vec<T>, Vec<T>)> = dx
        .par_chunks_mut(in_len)
        .enumerate()
        .map(|(i, dx_img)| {
            let img = &x.data()[i * in_len..(i + 1) * in_len];
            let up = &upstream.data()[i * out_len..(i + 1) * out_len];
            let mut blocks = vec![T::zero(); rows * hw];
            gather_blocks(&g, up, &mut blocks);
            // dx = W · blocks ; dW = x · blocksᵀ
            T::gemm(g.cin, rows, hw, p.weight.data(), (rows as isize, 1), &blocks, (hw as isize, 1), dx_img, false);
            let mut dw = vec![T::zero(); g.cin * rows];
            T::gemm(g.cin, hw, rows, img, (hw as isize, 1), &blocks, (1, hw as isize), &mut dw, false);
            (dw, sum_rows(up, 4 * hw))
        })
        .collect();
    let (dw, db) = reduce_partials(partials, g.cin * rows, g.cout);
    Ok((
        Tensor::from_parts(x.shape().clone(), dx),
        Tensor::from_parts(p.weight.shape().clone(), dw),
        Tensor::from_parts(p.bias.shape().clone(), db),
    ))
}
