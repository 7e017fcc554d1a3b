//! Dense row-major tensors and the feature/flow wrappers built on them.
//!
//! Every tensor owns one flat `f64` buffer with the last dimension fastest.
//! A tensor may be tagged [`DType::F32`], in which case its values are kept
//! rounded to single precision so that 32-bit files round-trip bit-exactly.

use crate::error::{input_err, shape_err, Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DType {
    F32,
    #[default]
    F64,
}

impl DType {
    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
    dtype: DType,
}

fn checked_len(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() {
        return shape_err("tensor needs at least one dimension");
    }
    if let Some(pos) = dims.iter().position(|&d| d == 0) {
        return shape_err(format!("dimension {pos} is zero in {dims:?}"));
    }
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Size(format!("flat length of {dims:?} overflows")))
}

impl Tensor {
    pub fn new(dims: &[usize], fill: f64) -> Result<Self> {
        let len = checked_len(dims)?;
        Ok(Self {
            dims: dims.to_vec(),
            data: vec![fill; len],
            dtype: DType::F64,
        })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::new(dims, 0.0)
    }

    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        let len = checked_len(dims)?;
        if len != data.len() {
            return shape_err(format!(
                "dims {dims:?} need {len} elements, got {}",
                data.len()
            ));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
            dtype: DType::F64,
        })
    }

    /// Retags the tensor. Converting to `F32` rounds every value to the
    /// nearest single-precision number.
    pub fn with_dtype(mut self, dtype: DType) -> Self {
        if dtype == DType::F32 {
            for v in &mut self.data {
                *v = *v as f32 as f64;
            }
        }
        self.dtype = dtype;
        self
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Raw mutable access. Writes bypass `F32` rounding.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn flat_index(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.dims.len() {
            return input_err(format!(
                "index rank {} does not match tensor rank {}",
                index.len(),
                self.dims.len()
            ));
        }
        let mut flat = 0usize;
        for (axis, (&i, &d)) in index.iter().zip(&self.dims).enumerate() {
            if i >= d {
                return input_err(format!("index {i} out of range {d} on axis {axis}"));
            }
            flat = flat * d + i;
        }
        Ok(flat)
    }

    pub fn get(&self, index: &[usize]) -> Result<f64> {
        Ok(self.data[self.flat_index(index)?])
    }

    pub fn set(&mut self, index: &[usize], value: f64) -> Result<()> {
        let flat = self.flat_index(index)?;
        self.data[flat] = match self.dtype {
            DType::F32 => value as f32 as f64,
            DType::F64 => value,
        };
        Ok(())
    }

    pub fn reshape(self, dims: &[usize]) -> Result<Self> {
        let len = checked_len(dims)?;
        if len != self.data.len() {
            return shape_err(format!("cannot reshape {:?} into {dims:?}", self.dims));
        }
        Ok(Self {
            dims: dims.to_vec(),
            ..self
        })
    }

    /// Serial left-to-right sum in flat index order.
    pub fn sum(&self) -> f64 {
        let mut acc = 0.0;
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.dims != other.dims {
            return shape_err(format!(
                "cannot compare {:?} with {:?}",
                self.dims, other.dims
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Inner product of the flat buffers.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.dims != other.dims {
            return shape_err(format!("cannot dot {:?} with {:?}", self.dims, other.dims));
        }
        let mut acc = 0.0;
        for (a, b) in self.data.iter().zip(&other.data) {
            acc += a * b;
        }
        Ok(acc)
    }
}

/// A `(C, H, W)` feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(tensor: Tensor) -> Result<Self> {
        if tensor.ndim() != 3 {
            return shape_err(format!(
                "feature map must be (C, H, W), got {:?}",
                tensor.dims()
            ));
        }
        Ok(Self(tensor))
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self> {
        Self::new(Tensor::zeros(&[channels, height, width])?)
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(Tensor::from_vec(&[channels, height, width], data)?)
    }

    pub fn channels(&self) -> usize {
        self.0.dims[0]
    }

    pub fn height(&self) -> usize {
        self.0.dims[1]
    }

    pub fn width(&self) -> usize {
        self.0.dims[2]
    }

    pub fn plane_len(&self) -> usize {
        self.height() * self.width()
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.0.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.0.data[c * n..(c + 1) * n]
    }

    /// Channels `[start, start + count)` as a new feature map.
    pub fn channel_range(&self, start: usize, count: usize) -> Result<FeatureMap> {
        if count == 0 || start + count > self.channels() {
            return input_err(format!(
                "channel range {start}..{} outside 0..{}",
                start + count,
                self.channels()
            ));
        }
        let n = self.plane_len();
        Self::from_vec(
            count,
            self.height(),
            self.width(),
            self.0.data[start * n..(start + count) * n].to_vec(),
        )
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor {
        &mut self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.0.dims == other.0.dims
    }
}

/// Per-pixel displacement `(2, H, W)`: channel 0 is dx, channel 1 is dy.
/// Backward-warp convention: the vector at `p` names where in the source
/// to sample for `p`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField(Tensor);

impl FlowField {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let dims = tensor.dims();
        if dims.len() != 3 || dims[0] != 2 {
            return shape_err(format!("flow field must be (2, H, W), got {dims:?}"));
        }
        if !tensor.is_finite() {
            return input_err("flow field contains non-finite values");
        }
        Ok(Self(tensor))
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(Tensor::zeros(&[2, height, width])?)
    }

    pub fn constant(height: usize, width: usize, dx: f64, dy: f64) -> Result<Self> {
        let mut t = Tensor::zeros(&[2, height, width])?;
        let n = height * width;
        t.data_mut()[..n].fill(dx);
        t.data_mut()[n..].fill(dy);
        Self::new(t)
    }

    pub fn height(&self) -> usize {
        self.0.dims[1]
    }

    pub fn width(&self) -> usize {
        self.0.dims[2]
    }

    pub fn dx(&self) -> &[f64] {
        let n = self.height() * self.width();
        &self.0.data[..n]
    }

    pub fn dy(&self) -> &[f64] {
        let n = self.height() * self.width();
        &self.0.data[n..]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}
