//! Deformable convolution and its decomposition into warps plus a 1×1 mix.
//!
//! Layout conventions shared by every routine here:
//!
//! * kernel taps are enumerated row-major over the `n × n` grid, so tap `k`
//!   sits at `(k / n - r, k % n - r)` with `r = (n - 1) / 2`;
//! * deformable group `g` owns input channels `[g·C/G, (g+1)·C/G)` and its
//!   offsets are shared by all of them;
//! * the decomposed path stacks warped channels group-major, then offset
//!   index, then channel within the group.

mod conv;
mod decompose;

pub use conv::{conv2d, deform_conv, modulated_deform_conv};
pub use decompose::{
    decomposed_deform_conv, equivalence_report, kernel_taps, kernel_to_pointwise,
    modulated_decomposed_deform_conv, pointwise_conv, stack_warped, zero_taps, EquivalenceReport,
    EQUIVALENCE_TOL,
};

use crate::error::{input_err, shape_err, Result};
use crate::tensor::{FlowField, Tensor};

/// `(C_out, C_in, n, n)` convolution weights with odd `n`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel(Tensor);

impl ConvKernel {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let d = tensor.dims();
        if d.len() != 4 || d[2] != d[3] {
            return shape_err(format!("kernel must be (C_out, C_in, n, n), got {d:?}"));
        }
        if d[2].is_multiple_of(2) {
            return shape_err(format!("kernel size {} is not odd", d[2]));
        }
        Ok(Self(tensor))
    }

    pub fn zeros(out_channels: usize, in_channels: usize, size: usize) -> Result<Self> {
        Self::new(Tensor::zeros(&[out_channels, in_channels, size, size])?)
    }

    pub fn from_vec(
        out_channels: usize,
        in_channels: usize,
        size: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        Self::new(Tensor::from_vec(
            &[out_channels, in_channels, size, size],
            data,
        )?)
    }

    pub fn out_channels(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn size(&self) -> usize {
        self.0.dims()[2]
    }

    pub fn taps(&self) -> usize {
        self.size() * self.size()
    }

    /// Weight of output `o`, input `c`, row-major tap `k`.
    #[inline]
    pub fn weight(&self, o: usize, c: usize, k: usize) -> f64 {
        self.0.data()[(o * self.in_channels() + c) * self.taps() + k]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor {
        &mut self.0
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }
}

/// Learned offsets `(G, N, 2, H, W)`; component 0 is dx, 1 is dy.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetField(Tensor);

impl OffsetField {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let d = tensor.dims();
        if d.len() != 5 || d[2] != 2 {
            return shape_err(format!("offsets must be (G, N, 2, H, W), got {d:?}"));
        }
        if !tensor.is_finite() {
            return input_err("offsets contain non-finite values");
        }
        Ok(Self(tensor))
    }

    pub fn zeros(groups: usize, per_group: usize, height: usize, width: usize) -> Result<Self> {
        Self::new(Tensor::zeros(&[groups, per_group, 2, height, width])?)
    }

    /// Every `(g, k)` offset set to a copy of `flow`.
    pub fn broadcast(flow: &FlowField, groups: usize, per_group: usize) -> Result<Self> {
        let mut out = Self::zeros(groups, per_group, flow.height(), flow.width())?;
        for g in 0..groups {
            for k in 0..per_group {
                out.component_mut(g, k, 0).copy_from_slice(flow.dx());
                out.component_mut(g, k, 1).copy_from_slice(flow.dy());
            }
        }
        Ok(out)
    }

    pub fn groups(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn per_group(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn height(&self) -> usize {
        self.0.dims()[3]
    }

    pub fn width(&self) -> usize {
        self.0.dims()[4]
    }

    fn plane_range(&self, g: usize, k: usize, comp: usize) -> std::ops::Range<usize> {
        let n = self.height() * self.width();
        let start = ((g * self.per_group() + k) * 2 + comp) * n;
        start..start + n
    }

    /// Plane of component `comp` (0 = dx, 1 = dy) for offset `k` of group `g`.
    pub fn component(&self, g: usize, k: usize, comp: usize) -> &[f64] {
        &self.0.data()[self.plane_range(g, k, comp)]
    }

    pub fn component_mut(&mut self, g: usize, k: usize, comp: usize) -> &mut [f64] {
        let r = self.plane_range(g, k, comp);
        &mut self.0.data_mut()[r]
    }

    pub fn dx(&self, g: usize, k: usize) -> &[f64] {
        self.component(g, k, 0)
    }

    pub fn dy(&self, g: usize, k: usize) -> &[f64] {
        self.component(g, k, 1)
    }

    /// Offset `(g, k)` as a standalone displacement field.
    pub fn displacement(&self, g: usize, k: usize) -> Result<FlowField> {
        let (h, w) = (self.height(), self.width());
        let mut data = Vec::with_capacity(2 * h * w);
        data.extend_from_slice(self.dx(g, k));
        data.extend_from_slice(self.dy(g, k));
        FlowField::new(Tensor::from_vec(&[2, h, w], data)?)
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
}

/// Modulation scalars `(G, N, H, W)` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskField(Tensor);

impl MaskField {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let d = tensor.dims();
        if d.len() != 4 {
            return shape_err(format!("masks must be (G, N, H, W), got {d:?}"));
        }
        if let Some(v) = tensor.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return input_err(format!("mask value {v} outside [0, 1]"));
        }
        Ok(Self(tensor))
    }

    pub fn filled(
        groups: usize,
        per_group: usize,
        height: usize,
        width: usize,
        value: f64,
    ) -> Result<Self> {
        Self::new(Tensor::new(&[groups, per_group, height, width], value)?)
    }

    pub fn groups(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn per_group(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn height(&self) -> usize {
        self.0.dims()[2]
    }

    pub fn width(&self) -> usize {
        self.0.dims()[3]
    }

    pub fn plane(&self, g: usize, k: usize) -> &[f64] {
        let n = self.height() * self.width();
        let start = (g * self.per_group() + k) * n;
        &self.0.data()[start..start + n]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    pub(crate) fn check_against(&self, offsets: &OffsetField) -> Result<()> {
        if self.groups() != offsets.groups()
            || self.per_group() != offsets.per_group()
            || self.height() != offsets.height()
            || self.width() != offsets.width()
        {
            return shape_err(format!(
                "masks {:?} do not match offsets {:?}",
                self.0.dims(),
                offsets.tensor().dims()
            ));
        }
        Ok(())
    }
}

/// `(C_out, S, 1, 1)` weights of the 1×1 convolution over `S` stacked
/// warped channels.
#[derive(Clone, Debug, PartialEq)]
pub struct PointwiseKernel(Tensor);

impl PointwiseKernel {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let d = tensor.dims();
        if d.len() != 4 || d[2] != 1 || d[3] != 1 {
            return shape_err(format!(
                "pointwise kernel must be (C_out, S, 1, 1), got {d:?}"
            ));
        }
        Ok(Self(tensor))
    }

    pub fn zeros(out_channels: usize, stacked: usize) -> Result<Self> {
        Self::new(Tensor::zeros(&[out_channels, stacked, 1, 1])?)
    }

    pub fn from_vec(out_channels: usize, stacked: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(Tensor::from_vec(&[out_channels, stacked, 1, 1], data)?)
    }

    /// Identity over `channels` channels (`S == C_out == channels`).
    pub fn identity(channels: usize) -> Result<Self> {
        let mut pw = Self::zeros(channels, channels)?;
        for c in 0..channels {
            pw.0.data_mut()[c * channels + c] = 1.0;
        }
        Ok(pw)
    }

    pub fn out_channels(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn stacked_channels(&self) -> usize {
        self.0.dims()[1]
    }

    #[inline]
    pub fn weight(&self, o: usize, s: usize) -> f64 {
        self.0.data()[o * self.stacked_channels() + s]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor {
        &mut self.0
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }
}

pub(crate) fn check_groups(channels: usize, groups: usize) -> Result<usize> {
    if groups == 0 || !channels.is_multiple_of(groups) {
        return shape_err(format!(
            "{channels} channels cannot be split into {groups} groups"
        ));
    }
    Ok(channels / groups)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_rejects_even_or_non_square() {
        assert!(ConvKernel::zeros(1, 1, 2).is_err());
        assert!(ConvKernel::new(Tensor::zeros(&[1, 1, 3, 1]).unwrap()).is_err());
        assert!(ConvKernel::zeros(2, 3, 5).is_ok());
    }

    #[test]
    fn masks_must_lie_in_unit_interval() {
        assert!(MaskField::filled(1, 1, 2, 2, 1.0).is_ok());
        assert!(MaskField::filled(1, 1, 2, 2, 1.5).is_err());
        assert!(MaskField::filled(1, 1, 2, 2, -0.1).is_err());
    }

    #[test]
    fn offset_components_are_addressed_group_major() {
        let t = Tensor::from_vec(&[2, 1, 2, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let off = OffsetField::new(t).unwrap();
        assert_eq!(off.dx(0, 0), &[1.0]);
        assert_eq!(off.dy(0, 0), &[2.0]);
        assert_eq!(off.dx(1, 0), &[3.0]);
        assert_eq!(off.dy(1, 0), &[4.0]);
    }
}
