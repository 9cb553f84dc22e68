//! Dense row-major tensors and the numeric substrate shared by every block:
//! naive 3D convolution, separable interpolation, spatial squeezing and
//! finite-difference gradients.

mod conv;
mod fd;
mod interp;
pub mod io;

use std::fmt;
use std::ops::Range;

use num_traits::Float;

use crate::error::{shape_err, Error, Result};

pub use conv::{conv3d, conv3d_backward, ConvGrads, ConvKernel};
pub use fd::{finite_difference_grad, max_relative_error, relative_error};
pub use interp::{
    natural_spline_eval, spline3_resize, trilinear_resize, trilinear_resize_backward,
};

/// Element width tag used by the STV1 file format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }

    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating point element type of a [`Tensor`].
pub trait Scalar:
    Float + Default + Send + Sync + fmt::Debug + fmt::Display + std::iter::Sum + 'static
{
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// Dense N-dimensional array, row-major with the last axis fastest.
#[derive(Clone, PartialEq)]
pub struct Tensor<S: Scalar = f64> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return shape_err("tensor rank must be at least 1");
    }
    if shape.contains(&0) {
        return shape_err(format!("all extents must be >= 1, got {shape:?}"));
    }
    Ok(shape.iter().product())
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<S>) -> Result<Self> {
        let shape = shape.into();
        let n = check_shape(&shape)?;
        if n != data.len() {
            return shape_err(format!(
                "shape {shape:?} holds {n} elements but {} were given",
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// Panics on an invalid shape; meant for literal shapes in library code.
    pub fn full(shape: impl Into<Vec<usize>>, value: S) -> Self {
        let shape = shape.into();
        let n = check_shape(&shape).expect("invalid tensor shape");
        Tensor { shape, data: vec![value; n] }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, S::one())
    }

    pub fn zeros_like(other: &Tensor<S>) -> Self {
        Tensor { shape: other.shape.clone(), data: vec![S::zero(); other.data.len()] }
    }

    /// Builds a tensor from a function of the flat (row-major) index.
    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> S) -> Self {
        let shape = shape.into();
        let n = check_shape(&shape).expect("invalid tensor shape");
        Tensor { shape, data: (0..n).map(&mut f).collect() }
    }

    pub fn from_vec1(data: Vec<S>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.shape[i + 1];
        }
        strides
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < ext, "index {ix} out of range on axis {i}");
            off = off * ext + ix;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> S {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: S) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    /// Destructures a rank-5 shape, reporting `what` on mismatch.
    pub fn dims5(&self, what: &str) -> Result<[usize; 5]> {
        match self.shape.as_slice() {
            &[a, b, c, d, e] => Ok([a, b, c, d, e]),
            s => shape_err(format!("{what}: expected rank-5 tensor, got shape {s:?}")),
        }
    }

    pub fn dims4(&self, what: &str) -> Result<[usize; 4]> {
        match self.shape.as_slice() {
            &[a, b, c, d] => Ok([a, b, c, d]),
            s => shape_err(format!("{what}: expected rank-4 tensor, got shape {s:?}")),
        }
    }

    pub fn dims3(&self, what: &str) -> Result<[usize; 3]> {
        match self.shape.as_slice() {
            &[a, b, c] => Ok([a, b, c]),
            s => shape_err(format!("{what}: expected rank-3 tensor, got shape {s:?}")),
        }
    }

    pub fn dims2(&self, what: &str) -> Result<[usize; 2]> {
        match self.shape.as_slice() {
            &[a, b] => Ok([a, b]),
            s => shape_err(format!("{what}: expected rank-2 tensor, got shape {s:?}")),
        }
    }

    pub fn expect_shape(&self, shape: &[usize], what: &str) -> Result<()> {
        if self.shape != shape {
            return shape_err(format!("{what}: expected shape {shape:?}, got {:?}", self.shape));
        }
        Ok(())
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn into_reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor<S>, f: impl Fn(S, S) -> S) -> Result<Self> {
        if self.shape != other.shape {
            return shape_err(format!(
                "elementwise op on mismatched shapes {:?} and {:?}",
                self.shape, other.shape
            ));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor<S>) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<S>) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<S>) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: S) -> Self {
        self.map(|v| v * s)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor<S>) -> Result<()> {
        if self.shape != other.shape {
            return shape_err(format!(
                "accumulate on mismatched shapes {:?} and {:?}",
                self.shape, other.shape
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> S {
        self.sum() / S::from_f64(self.data.len() as f64)
    }

    pub fn max(&self) -> S {
        self.data.iter().copied().fold(S::neg_infinity(), S::max)
    }

    pub fn min(&self) -> S {
        self.data.iter().copied().fold(S::infinity(), S::min)
    }

    pub fn dot(&self, other: &Tensor<S>) -> Result<S> {
        if self.shape != other.shape {
            return shape_err("dot product on mismatched shapes");
        }
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<S>) -> S {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(S::zero(), S::max)
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| T::from_f64(v.as_f64())).collect(),
        }
    }

    /// (outer, axis extent, inner) block sizes around `axis`.
    fn split_at_axis(&self, axis: usize) -> (usize, usize, usize) {
        let outer = self.shape[..axis].iter().product();
        let inner = self.shape[axis + 1..].iter().product();
        (outer, self.shape[axis], inner)
    }

    /// Copies the sub-range `range` along `axis`.
    pub fn narrow(&self, axis: usize, range: Range<usize>) -> Result<Self> {
        if axis >= self.rank() || range.end > self.shape[axis] || range.is_empty() {
            return shape_err(format!(
                "narrow {range:?} on axis {axis} of shape {:?}",
                self.shape
            ));
        }
        let (outer, ext, inner) = self.split_at_axis(axis);
        let len = range.len();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner;
            data.extend_from_slice(&self.data[base + range.start * inner..base + range.end * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Tensor::new(shape, data)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor<S>], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of no tensors".into()))?;
        if axis >= first.rank() {
            return shape_err(format!("concat axis {axis} out of range"));
        }
        for p in parts {
            if p.rank() != first.rank()
                || p.shape.iter().zip(&first.shape).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return shape_err(format!(
                    "concat on axis {axis}: incompatible shapes {:?} and {:?}",
                    first.shape, p.shape
                ));
            }
        }
        let (outer, _, inner) = first.split_at_axis(axis);
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let ext = p.shape[axis];
                data.extend_from_slice(&p.data[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Tensor::new(shape, data)
    }

    /// Selects `indices` (in order, repeats allowed) along `axis`.
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() || indices.iter().any(|&i| i >= self.shape[axis]) {
            return shape_err(format!("index_select {indices:?} on axis {axis} of {:?}", self.shape));
        }
        let (outer, ext, inner) = self.split_at_axis(axis);
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * ext + i) * inner;
                data.extend_from_slice(&self.data[base..base + inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = indices.len();
        Tensor::new(shape, data)
    }
}

impl Tensor<f64> {
    /// Matrix-vector product for a rank-2 tensor `[rows, cols]`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        let [rows, cols] = self.dims2("matvec")?;
        if v.len() != cols {
            return shape_err(format!("matvec: matrix has {cols} columns, vector {}", v.len()));
        }
        Ok((0..rows)
            .map(|r| self.data[r * cols..(r + 1) * cols].iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// Transposed product `selfᵀ · v`.
    pub fn matvec_t(&self, v: &[f64]) -> Result<Vec<f64>> {
        let [rows, cols] = self.dims2("matvec_t")?;
        if v.len() != rows {
            return shape_err(format!("matvec_t: matrix has {rows} rows, vector {}", v.len()));
        }
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            let vr = v[r];
            for (o, &a) in out.iter_mut().zip(&self.data[r * cols..(r + 1) * cols]) {
                *o += a * vr;
            }
        }
        Ok(out)
    }
}

/// Per-frame channel vectors `[B, C, T]`, typically the spatial mean of a
/// `[B, C, T, H, W]` activation volume.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence<S: Scalar = f64>(Tensor<S>);

impl<S: Scalar> EmbeddingSequence<S> {
    pub fn new(t: Tensor<S>) -> Result<Self> {
        t.dims3("embedding sequence")?;
        Ok(EmbeddingSequence(t))
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<S> {
        self.0
    }

    pub fn batch(&self) -> usize {
        self.0.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.0.shape[1]
    }

    pub fn frames(&self) -> usize {
        self.0.shape[2]
    }

    pub fn get(&self, b: usize, c: usize, t: usize) -> S {
        let [_, ch, fr] = [self.batch(), self.channels(), self.frames()];
        self.0.data[(b * ch + c) * fr + t]
    }

    /// Channel vector of frame `t` in batch item `b`.
    pub fn frame(&self, b: usize, t: usize) -> Vec<S> {
        (0..self.channels()).map(|c| self.get(b, c, t)).collect()
    }

    /// All frames of batch item `b`, indexed `[t][c]`.
    pub fn frames_of(&self, b: usize) -> Vec<Vec<S>> {
        (0..self.frames()).map(|t| self.frame(b, t)).collect()
    }

    /// Builds `[B, C, T]` from per-item frame lists `items[b][t][c]`.
    pub fn from_frames(items: &[Vec<Vec<S>>]) -> Result<Self> {
        let b = items.len();
        let t = items.first().map_or(0, |i| i.len());
        let c = items.first().and_then(|i| i.first()).map_or(0, |f| f.len());
        let mut data = vec![S::zero(); b * c * t];
        for (bi, item) in items.iter().enumerate() {
            if item.len() != t {
                return shape_err("ragged frame lists");
            }
            for (ti, frame) in item.iter().enumerate() {
                if frame.len() != c {
                    return shape_err("ragged channel vectors");
                }
                for (ci, &v) in frame.iter().enumerate() {
                    data[(bi * c + ci) * t + ti] = v;
                }
            }
        }
        Ok(EmbeddingSequence(Tensor::new(vec![b, c, t], data)?))
    }
}

/// Spatial mean over `H × W` for each `(b, c, t)`.
pub fn squeeze_spatial<S: Scalar>(a: &Tensor<S>) -> Result<EmbeddingSequence<S>> {
    let [b, c, t, h, w] = a.dims5("squeeze_spatial")?;
    let hw = h * w;
    let inv = S::from_f64(1.0 / hw as f64);
    let data = a.data.chunks(hw).map(|plane| plane.iter().copied().sum::<S>() * inv).collect();
    EmbeddingSequence::new(Tensor::new(vec![b, c, t], data)?)
}

/// Gradient of [`squeeze_spatial`]: spreads each `[B,C,T]` entry evenly over its plane.
pub fn squeeze_spatial_backward<S: Scalar>(grad: &Tensor<S>, h: usize, w: usize) -> Result<Tensor<S>> {
    let [b, c, t] = grad.dims3("squeeze_spatial_backward")?;
    let hw = h * w;
    let inv = S::from_f64(1.0 / hw as f64);
    let mut data = Vec::with_capacity(b * c * t * hw);
    for &g in &grad.data {
        data.extend(std::iter::repeat_n(g * inv, hw));
    }
    Tensor::new(vec![b, c, t, h, w], data)
}

/// Multiplies `a[B,C,T,H,W]` by `h[B,C,T]` broadcast over the spatial plane.
pub fn broadcast_mul(a: &Tensor<f64>, h: &Tensor<f64>) -> Result<Tensor<f64>> {
    let [b, c, t, hh, ww] = a.dims5("broadcast_mul")?;
    h.expect_shape(&[b, c, t], "broadcast_mul attention")?;
    let hw = hh * ww;
    let mut out = a.data.clone();
    for (plane, &s) in out.chunks_mut(hw).zip(&h.data) {
        plane.iter_mut().for_each(|v| *v *= s);
    }
    Tensor::new(a.shape.clone(), out)
}

/// Gradients of [`broadcast_mul`] with respect to the volume and the attention.
pub fn broadcast_mul_backward(
    a: &Tensor<f64>,
    h: &Tensor<f64>,
    grad: &Tensor<f64>,
) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let [_, _, _, hh, ww] = a.dims5("broadcast_mul_backward")?;
    grad.expect_shape(a.shape(), "broadcast_mul upstream")?;
    let hw = hh * ww;
    let mut da = grad.data.clone();
    let mut dh = vec![0.0; h.len()];
    for (i, (plane, &s)) in da.chunks_mut(hw).zip(&h.data).enumerate() {
        let src = &a.data[i * hw..(i + 1) * hw];
        dh[i] = plane.iter().zip(src).map(|(g, x)| g * x).sum();
        plane.iter_mut().for_each(|v| *v *= s);
    }
    Ok((Tensor::new(a.shape.clone(), da)?, Tensor::new(h.shape.clone(), dh)?))
}
