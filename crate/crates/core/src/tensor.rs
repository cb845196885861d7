//! Dense tensors, summed-area tables and vector normalization.
//!
//! Feature maps are stored row-major as `H x W x C` with the channel as the
//! innermost axis, so a window sum reads contiguous channel runs.

use std::fmt::Debug;
use std::iter::Sum;

use crate::error::{Error, Result};

/// Floating point scalar the numeric kernels are generic over.
///
/// Everything persisted is `f32`; the `f64` instantiation exists so gradient
/// checks can run the exact same code paths with 64-bit shadow arithmetic.
pub trait Real:
    num_traits::Float + Sum + Debug + Default + Send + Sync + 'static
{
    fn lift(x: f64) -> Self;
    fn widen(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn lift(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn widen(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn lift(x: f64) -> Self {
        x
    }
    #[inline]
    fn widen(self) -> f64 {
        self
    }
}

pub const MAX_RANK: usize = 4;

/// Dense row-major array with explicit dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        check_dims(&dims)?;
        let len: usize = dims.iter().product();
        if data.len() != len {
            return Err(Error::invalid(format!(
                "tensor data length {} does not match dims {:?} (expected {})",
                data.len(),
                dims,
                len
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        Self::filled(dims, T::zero())
    }

    pub fn filled(dims: Vec<usize>, value: T) -> Result<Self> {
        check_dims(&dims)?;
        let len = dims.iter().product();
        Ok(Self {
            dims,
            data: vec![value; len],
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access to the payload. The length is fixed, so the shape
    /// invariant cannot be broken through this.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Shape of a rank-3 feature map as `(height, width, channels)`.
    pub fn hwc(&self) -> Result<(usize, usize, usize)> {
        match self.dims[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(Error::invalid(format!(
                "expected an H x W x C map, got dims {:?}",
                self.dims
            ))),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| U::lift(v.widen())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.is_empty() || dims.len() > MAX_RANK {
        return Err(Error::invalid(format!(
            "tensor rank must be in 1..={MAX_RANK}, got {}",
            dims.len()
        )));
    }
    if dims.contains(&0) {
        return Err(Error::invalid(format!(
            "tensor dims must be positive, got {dims:?}"
        )));
    }
    Ok(())
}

/// Per-channel 2-D prefix sums of an `H x W x C` map, accumulated in `f64`,
/// with a zero top row and left column.
#[derive(Clone, Debug)]
pub struct SummedAreaTable {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>,
}

impl SummedAreaTable {
    pub fn build<T: Real>(map: &Tensor<T>) -> Result<Self> {
        let (h, w, c) = map.hwc()?;
        let stride = (w + 1) * c;
        let mut values = vec![0.0f64; (h + 1) * stride];
        let mut row_sum = vec![0.0f64; c];
        let src = map.data();
        for i in 0..h {
            row_sum.iter_mut().for_each(|v| *v = 0.0);
            let (above, below) = values.split_at_mut((i + 1) * stride);
            let prev = &above[i * stride..];
            let cur = &mut below[..stride];
            for j in 0..w {
                let px = &src[(i * w + j) * c..(i * w + j + 1) * c];
                let base = (j + 1) * c;
                for ch in 0..c {
                    row_sum[ch] += px[ch].widen();
                    cur[base + ch] = prev[base + ch] + row_sum[ch];
                }
            }
        }
        Ok(Self {
            height: h,
            width: w,
            channels: c,
            values,
        })
    }

    /// Source map height `H` (the table itself has `H + 1` rows).
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Entry `sat[i][j][c]` for `i <= H`, `j <= W`.
    pub fn get(&self, i: usize, j: usize, c: usize) -> f64 {
        assert!(i <= self.height && j <= self.width && c < self.channels);
        self.values[(i * (self.width + 1) + j) * self.channels + c]
    }

    fn cell(&self, i: usize, j: usize) -> &[f64] {
        let off = (i * (self.width + 1) + j) * self.channels;
        &self.values[off..off + self.channels]
    }

    /// Per-channel sum over the `h x w` window whose top-left cell is
    /// `(top, left)`.
    pub fn window_sum(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Vec<f64>> {
        if h == 0 || w == 0 || top + h > self.height || left + w > self.width {
            return Err(Error::invalid(format!(
                "window (top={top}, left={left}, h={h}, w={w}) outside {}x{} map",
                self.height, self.width
            )));
        }
        let mut out = vec![0.0; self.channels];
        self.accumulate_window(top, left, h, w, &mut out);
        Ok(out)
    }

    /// Adds the window sum into `out` without bounds validation beyond
    /// slice indexing.
    #[inline]
    pub(crate) fn accumulate_window(
        &self,
        top: usize,
        left: usize,
        h: usize,
        w: usize,
        out: &mut [f64],
    ) {
        let br = self.cell(top + h, left + w);
        let tr = self.cell(top, left + w);
        let bl = self.cell(top + h, left);
        let tl = self.cell(top, left);
        for (c, o) in out.iter_mut().enumerate() {
            *o += br[c] - tr[c] - bl[c] + tl[c];
        }
    }
}

/// Norm below which a vector is treated as zero by [`l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

pub fn l2_norm<T: Real>(v: &[T]) -> f64 {
    v.iter().map(|x| x.widen() * x.widen()).sum::<f64>().sqrt()
}

/// Scales `v` to unit Euclidean norm. Vectors with norm `<= 1e-12` are
/// returned unchanged.
pub fn l2_normalize<T: Real>(v: &[T]) -> Vec<T> {
    let norm = l2_norm(v);
    if norm <= NORM_EPS {
        return v.to_vec();
    }
    v.iter().map(|&x| T::lift(x.widen() / norm)).collect()
}

/// Adjoint of [`l2_normalize`] at input `v`: maps `dL/dy` to `dL/dv`.
pub fn l2_normalize_backward<T: Real>(v: &[T], grad_out: &[T]) -> Vec<T> {
    let norm = l2_norm(v);
    if norm <= NORM_EPS {
        return grad_out.to_vec();
    }
    let dot: f64 = v
        .iter()
        .zip(grad_out)
        .map(|(x, g)| x.widen() / norm * g.widen())
        .sum();
    v.iter()
        .zip(grad_out)
        .map(|(x, g)| T::lift((g.widen() - x.widen() / norm * dot) / norm))
        .collect()
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.widen() * y.widen()).sum()
}
