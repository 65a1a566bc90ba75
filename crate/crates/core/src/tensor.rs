//! Dense row-major tensors of rank 1 to 4.
//!
//! Rank-4 tensors use NCHW layout. Tensors are immutable values: every
//! operation returns a fresh tensor. There is no broadcasting; shapes must
//! agree explicitly.

use std::fmt;
use std::ops::Range;

use num_traits::Float;

use crate::error::{Error, Result};

/// Element type code used by the RFT1 format.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating point element types a [`Tensor`] can hold.
pub trait Element: Float + Default + Send + Sync + fmt::Debug + fmt::Display + 'static {
    const DTYPE: DType;

    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// `c = a * b` (or `c += a * b` when `accumulate`), with arbitrary row and
    /// column strides for each operand. `a` is m×k, `b` is k×n, `c` is m×n.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        c: &mut [Self],
        accumulate: bool,
    );
}

macro_rules! impl_element {
    ($t:ty, $dtype:expr, $gemm:path) => {
        impl Element for $t {
            const DTYPE: DType = $dtype;

            #[inline]
            fn of_f64(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("element width"))
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                c: &mut [Self],
                accumulate: bool,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(c.len() >= m * n, "gemm output too small");
                assert!(span(m, k, a_strides) <= a.len(), "gemm lhs out of bounds");
                assert!(span(k, n, b_strides) <= b.len(), "gemm rhs out of bounds");
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the asserts above bound every index the kernel
                // touches inside the provided slices.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

fn span(rows: usize, cols: usize, strides: (isize, isize)) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * strides.0 as usize + (cols - 1) * strides.1 as usize + 1
}

impl_element!(f32, DType::F32, matrixmultiply::sgemm);
impl_element!(f64, DType::F64, matrixmultiply::dgemm);

/// Ordered tensor extents, rank 1..=4, every extent at least 1.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.len() > 4 {
            return Err(Error::shape(format!("rank must be 1..=4, got {}", dims.len())));
        }
        if let Some(pos) = dims.iter().position(|&d| d == 0) {
            return Err(Error::shape(format!("extent {pos} of {dims:?} is zero")));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= isize::MAX as usize)
            .ok_or_else(|| Error::shape(format!("element count of {dims:?} overflows")))?;
        Ok(Shape(dims.to_vec()))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// `(N, C, H, W)` for rank-4 shapes.
    pub fn nchw(&self) -> Result<(usize, usize, usize, usize)> {
        match self.0[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(format!("expected NCHW tensor, got shape {self}"))),
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "{}", parts.join("x"))
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// Dense tensor with a row-major contiguous buffer.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: &[usize], value: T) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = vec![value; shape.numel()];
        Ok(Tensor { shape, data })
    }

    pub fn from_values(dims: &[usize], values: Vec<T>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if values.len() != shape.numel() {
            return Err(Error::shape(format!(
                "{} values supplied for shape {shape} ({} elements)",
                values.len(),
                shape.numel()
            )));
        }
        Ok(Tensor { shape, data: values })
    }

    /// Builds a tensor whose buffer length is already known to match.
    pub(crate) fn from_parts(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor { shape, data }
    }

    pub(crate) fn zeros_like_shape(shape: &Shape) -> Self {
        Tensor { shape: shape.clone(), data: vec![T::zero(); shape.numel()] }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.clone()
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    fn offset(&self, index: &[usize]) -> Result<usize> {
        let dims = self.shape.dims();
        if index.len() != dims.len() {
            return Err(Error::shape(format!("index {index:?} has wrong rank for shape {}", self.shape)));
        }
        let mut off = 0;
        for (&i, &d) in index.iter().zip(dims) {
            if i >= d {
                return Err(Error::shape(format!("index {index:?} out of bounds for shape {}", self.shape)));
            }
            off = off * d + i;
        }
        Ok(off)
    }

    pub fn get(&self, index: &[usize]) -> Result<T> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn reshape(self, dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.data.len() {
            return Err(Error::shape(format!("cannot reshape {} into {shape}", self.shape)));
        }
        Ok(Tensor { shape, data: self.data })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::of_f64(v.as_f64())).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise sum of two tensors of identical shape.
    pub fn add(&self, other: &Tensor<T>) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(format!("cannot add {} and {}", self.shape, other.shape)));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!("cannot add {} and {}", self.shape, other.shape)));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    /// Concatenates two NCHW tensors along the channel axis; `self` comes first.
    pub fn concat_channels(&self, other: &Tensor<T>) -> Result<Self> {
        let (n, ca, h, w) = self.shape.nchw()?;
        let (nb, cb, hb, wb) = other.shape.nchw()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape(format!("concat needs equal N, H, W: {} vs {}", self.shape, other.shape)));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * (ca + cb) * plane);
        for i in 0..n {
            data.extend_from_slice(&self.data[i * ca * plane..(i + 1) * ca * plane]);
            data.extend_from_slice(&other.data[i * cb * plane..(i + 1) * cb * plane]);
        }
        Ok(Tensor { shape: Shape(vec![n, ca + cb, h, w]), data })
    }

    /// Copies channels `range` of an NCHW tensor.
    pub fn channel_slice(&self, range: Range<usize>) -> Result<Self> {
        let (n, c, h, w) = self.shape.nchw()?;
        if range.start >= range.end || range.end > c {
            return Err(Error::shape(format!("channel range {range:?} invalid for {c} channels")));
        }
        let plane = h * w;
        let width = range.end - range.start;
        let mut data = Vec::with_capacity(n * width * plane);
        for i in 0..n {
            let base = i * c * plane;
            data.extend_from_slice(&self.data[base + range.start * plane..base + range.end * plane]);
        }
        Ok(Tensor { shape: Shape(vec![n, width, h, w]), data })
    }

    /// Copies batch item `index` of an NCHW tensor as a batch of one.
    pub fn batch_item(&self, index: usize) -> Result<Self> {
        let (n, c, h, w) = self.shape.nchw()?;
        if index >= n {
            return Err(Error::shape(format!("batch index {index} out of range for N={n}")));
        }
        let len = c * h * w;
        Ok(Tensor { shape: Shape(vec![1, c, h, w]), data: self.data[index * len..(index + 1) * len].to_vec() })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::shape("cannot stack zero tensors"))?;
        if first.rank() >= 4 {
            return Err(Error::shape("stacked tensors must have rank < 4"));
        }
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape(format!("cannot stack {} with {}", t.shape, first.shape)));
            }
            data.extend_from_slice(&t.data);
        }
        let mut dims = vec![items.len()];
        dims.extend_from_slice(first.dims());
        Ok(Tensor { shape: Shape::new(&dims)?, data })
    }

    pub fn rank(&self) -> usize {
        self.shape.rank()
    }

    /// Sum of all elements in flat row-major order, accumulated sequentially.
    pub fn reduce_sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    /// Encodes the tensor in the RFT1 binary format.
    pub fn to_rft1(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(6 + 4 * self.rank() + self.len() * T::DTYPE.size());
        out.extend_from_slice(RFT1_MAGIC);
        out.push(T::DTYPE.code());
        out.push(self.rank() as u8);
        for &d in self.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            v.write_le(&mut out);
        }
        out
    }

    /// Decodes a standalone RFT1 buffer; trailing bytes are an error.
    pub fn from_rft1(bytes: &[u8]) -> Result<Self> {
        let (t, used) = Self::read_rft1_prefix(bytes)?;
        if used != bytes.len() {
            return Err(Error::format(format!("{} trailing bytes after RFT1 tensor", bytes.len() - used)));
        }
        Ok(t)
    }

    /// Decodes one RFT1 tensor from the front of `bytes`, returning it and
    /// the number of bytes consumed.
    pub fn read_rft1_prefix(bytes: &[u8]) -> Result<(Self, usize)> {
        let header = Rft1Header::parse(bytes)?;
        if header.dtype != T::DTYPE {
            return Err(Error::DType { expected: T::DTYPE.name(), found: header.dtype.name() });
        }
        let width = T::DTYPE.size();
        let end = header.data_offset + header.shape.numel() * width;
        if bytes.len() < end {
            return Err(Error::format(format!("RFT1 payload truncated: need {end} bytes, have {}", bytes.len())));
        }
        let data = bytes[header.data_offset..end].chunks_exact(width).map(T::read_le).collect();
        Ok((Tensor { shape: header.shape, data }, end))
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor<{}>{:?} ", T::DTYPE.name(), self.shape)?;
        let head = &self.data[..self.data.len().min(PREVIEW)];
        write!(f, "{head:?}")?;
        if self.data.len() > PREVIEW {
            write!(f, " ..")?;
        }
        Ok(())
    }
}

pub const RFT1_MAGIC: &[u8; 4] = b"RFT1";

/// Parsed RFT1 header.
#[derive(Debug, Clone)]
pub struct Rft1Header {
    pub dtype: DType,
    pub shape: Shape,
    pub data_offset: usize,
}

impl Rft1Header {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 6 {
            return Err(Error::format("RFT1 header truncated"));
        }
        if &bytes[..4] != RFT1_MAGIC {
            return Err(Error::format("bad RFT1 magic"));
        }
        let dtype =
            DType::from_code(bytes[4]).ok_or_else(|| Error::format(format!("unknown RFT1 dtype code {}", bytes[4])))?;
        let rank = bytes[5] as usize;
        if !(1..=4).contains(&rank) {
            return Err(Error::format(format!("RFT1 rank {rank} outside 1..=4")));
        }
        let data_offset = 6 + 4 * rank;
        if bytes.len() < data_offset {
            return Err(Error::format("RFT1 extents truncated"));
        }
        let dims: Vec<usize> = bytes[6..data_offset]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
            .collect();
        let shape = Shape::new(&dims).map_err(|e| Error::format(format!("RFT1 shape: {e}")))?;
        Ok(Rft1Header { dtype, shape, data_offset })
    }
}

/// A tensor whose element type is only known at run time (e.g. read from disk).
#[derive(Debug, Clone, PartialEq)]
pub enum DynTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl DynTensor {
    pub fn from_rft1(bytes: &[u8]) -> Result<Self> {
        match Rft1Header::parse(bytes)?.dtype {
            DType::F32 => Tensor::from_rft1(bytes).map(DynTensor::F32),
            DType::F64 => Tensor::from_rft1(bytes).map(DynTensor::F64),
        }
    }

    pub fn to_rft1(&self) -> Vec<u8> {
        match self {
            DynTensor::F32(t) => t.to_rft1(),
            DynTensor::F64(t) => t.to_rft1(),
        }
    }
}

pub fn read_rft1_file<T: Element>(path: &std::path::Path) -> Result<Tensor<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::from_rft1(&bytes).map_err(|e| e.context(path.display()))
}

pub fn write_rft1_file<T: Element>(path: &std::path::Path, t: &Tensor<T>) -> Result<()> {
    std::fs::write(path, t.to_rft1()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zeros_and_lengths() {
        let z = Tensor::<f32>::zeros(&[2, 2]).unwrap();
        assert_eq!(z.data(), &[0.0; 4]);
        assert_eq!(Tensor::<f32>::zeros(&[1, 1, 2, 2]).unwrap().len(), 4);
        assert!(Tensor::<f32>::zeros(&[0]).is_err());
        assert!(Tensor::<f32>::zeros(&[]).is_err());
        assert!(Tensor::<f32>::zeros(&[1, 1, 1, 1, 1]).is_err());
        assert!(Tensor::<f32>::zeros(&[usize::MAX, 4]).is_err());
    }

    #[test]
    fn from_values_is_row_major() {
        let t = Tensor::<f32>::from_values(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.get(&[1, 0]).unwrap(), 3.0);
        assert!(Tensor::<f32>::from_values(&[4], vec![1.0, 2.0, 3.0]).is_err());
        let s = Tensor::<f32>::from_values(&[1, 1, 1, 1], vec![7.0]).unwrap();
        assert_eq!(s.get(&[0, 0, 0, 0]).unwrap(), 7.0);
    }

    #[test]
    fn add_examples() {
        let a = Tensor::<f32>::from_values(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f32>::from_values(&[2], vec![3.0, 4.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
        let big = Tensor::<f32>::full(&[1, 16, 128, 128], 0.5).unwrap();
        assert_eq!(big.add(&big).unwrap().dims(), &[1, 16, 128, 128]);
        let c = Tensor::<f32>::zeros(&[3]).unwrap();
        assert!(a.add(&c).is_err());
    }

    #[test]
    fn concat_examples() {
        let a = Tensor::<f32>::full(&[1, 15, 128, 128], 1.0).unwrap();
        let b = Tensor::<f32>::full(&[1, 1, 128, 128], 2.0).unwrap();
        let c = a.concat_channels(&b).unwrap();
        assert_eq!(c.dims(), &[1, 16, 128, 128]);
        assert_eq!(c.channel_slice(0..1).unwrap(), a.channel_slice(0..1).unwrap());
        let x = Tensor::<f32>::zeros(&[1, 3, 4, 4]).unwrap();
        let y = Tensor::<f32>::zeros(&[1, 3, 5, 4]).unwrap();
        assert!(x.concat_channels(&y).is_err());
    }

    #[test]
    fn reduce_sum_examples() {
        let t = Tensor::<f32>::from_values(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(t.reduce_sum(), 6.0);
        assert_eq!(Tensor::<f32>::zeros(&[8]).unwrap().reduce_sum(), 0.0);
    }

    #[test]
    fn rft1_layout_is_exact() {
        let t = Tensor::<f32>::from_values(&[2], vec![1.0, -2.0]).unwrap();
        let bytes = t.to_rft1();
        let mut expected = b"RFT1".to_vec();
        expected.extend_from_slice(&[0, 1, 2, 0, 0, 0]);
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn rft1_rejects_corruption() {
        let t = Tensor::<f64>::from_values(&[2, 3], (0..6).map(f64::from).collect()).unwrap();
        let bytes = t.to_rft1();
        for cut in 0..bytes.len() {
            assert!(Tensor::<f64>::from_rft1(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Tensor::<f64>::from_rft1(&extra).is_err());
        assert!(matches!(Tensor::<f32>::from_rft1(&bytes), Err(Error::DType { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Tensor::<f64>::from_rft1(&bad).is_err());
        assert_eq!(DynTensor::from_rft1(&bytes).unwrap(), DynTensor::F64(t));
    }

    fn small_tensor() -> impl Strategy<Value = Tensor<f32>> {
        (1usize..3, 1usize..4, 1usize..5, 1usize..5).prop_flat_map(|(n, c, h, w)| {
            proptest::collection::vec(-1e3f32..1e3, n * c * h * w)
                .prop_map(move |v| Tensor::from_values(&[n, c, h, w], v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn add_zero_is_identity(x in small_tensor()) {
            let z = Tensor::zeros(x.dims()).unwrap();
            let y = x.add(&z).unwrap();
            prop_assert!(y.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }

        #[test]
        fn concat_then_slice_recovers_inputs(a in small_tensor(), extra in 1usize..4) {
            let (n, _, h, w) = a.shape().nchw().unwrap();
            let b = Tensor::full(&[n, extra, h, w], 3.5f32).unwrap();
            let c = a.concat_channels(&b).unwrap();
            let ca = a.dims()[1];
            prop_assert_eq!(c.channel_slice(0..ca).unwrap(), a);
            prop_assert_eq!(c.channel_slice(ca..ca + extra).unwrap(), b);
        }

        #[test]
        fn reduce_sum_is_bit_stable(x in small_tensor()) {
            prop_assert_eq!(x.reduce_sum().to_bits(), x.reduce_sum().to_bits());
        }

        #[test]
        fn rft1_roundtrip(x in small_tensor()) {
            let back = Tensor::<f32>::from_rft1(&x.to_rft1()).unwrap();
            prop_assert!(back.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert_eq!(back.dims(), x.dims());
        }
    }
}
