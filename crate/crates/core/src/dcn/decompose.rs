use super::{check_groups, ConvKernel, MaskField, OffsetField, PointwiseKernel};
use crate::error::{shape_err, Result};
use crate::sampling::{warp_plane, BaseOffset};
use crate::tensor::FeatureMap;

/// Threshold used by [`equivalence_report`] to declare the two paths equal.
pub const EQUIVALENCE_TOL: f64 = 1e-10;

/// Row-major tap positions of an `n × n` kernel.
pub fn kernel_taps(n: usize) -> Vec<BaseOffset> {
    let r = (n / 2) as i32;
    (0..n * n)
        .map(|k| BaseOffset::new((k / n) as i32 - r, (k % n) as i32 - r))
        .collect()
}

/// `count` zero taps, for offset sets with no kernel-grid meaning.
pub fn zero_taps(count: usize) -> Vec<BaseOffset> {
    vec![BaseOffset::ZERO; count]
}

/// Rearranges `(C_out, C_in, n, n)` weights into the 1×1 weights over the
/// stacked warped channels. Stacked channel `g·N·Cg + k·Cg + l` carries
/// input channel `g·Cg + l` warped by offset `k` of group `g`.
pub fn kernel_to_pointwise(kernel: &ConvKernel, groups: usize) -> Result<PointwiseKernel> {
    let cin = kernel.in_channels();
    let cg = check_groups(cin, groups)?;
    let nk = kernel.taps();
    let stacked = groups * nk * cg;
    let mut pw = PointwiseKernel::zeros(kernel.out_channels(), stacked)?;
    let data = pw.tensor_mut().data_mut();
    for o in 0..kernel.out_channels() {
        for g in 0..groups {
            for k in 0..nk {
                for l in 0..cg {
                    data[o * stacked + (g * nk + k) * cg + l] = kernel.weight(o, g * cg + l, k);
                }
            }
        }
    }
    Ok(pw)
}

pub(crate) fn check_decomposed(
    x: &FeatureMap,
    offsets: &OffsetField,
    masks: Option<&MaskField>,
    taps: &[BaseOffset],
    groups: usize,
) -> Result<usize> {
    let cg = check_groups(x.channels(), groups)?;
    if offsets.groups() != groups {
        return shape_err(format!(
            "offsets carry {} groups, expected {groups}",
            offsets.groups()
        ));
    }
    if taps.len() != offsets.per_group() {
        return shape_err(format!(
            "{} taps given for {} offsets per group",
            taps.len(),
            offsets.per_group()
        ));
    }
    if offsets.height() != x.height() || offsets.width() != x.width() {
        return shape_err("offset spatial size differs from the feature");
    }
    if let Some(m) = masks {
        m.check_against(offsets)?;
    }
    Ok(cg)
}

/// Warps each group's channels by each of its offsets (plus the matching
/// tap) and stacks the results group-major, offset-index, then channel.
/// With masks, each warped plane is scaled by its mask.
pub fn stack_warped(
    x: &FeatureMap,
    offsets: &OffsetField,
    masks: Option<&MaskField>,
    taps: &[BaseOffset],
    groups: usize,
) -> Result<FeatureMap> {
    let cg = check_decomposed(x, offsets, masks, taps, groups)?;
    let n = offsets.per_group();
    let (h, w) = (x.height(), x.width());
    let mut stacked = FeatureMap::zeros(groups * n * cg, h, w)?;
    for g in 0..groups {
        for (k, &tap) in taps.iter().enumerate() {
            for l in 0..cg {
                let dst = stacked.plane_mut((g * n + k) * cg + l);
                warp_plane(
                    x.plane(g * cg + l),
                    h,
                    w,
                    offsets.dx(g, k),
                    offsets.dy(g, k),
                    tap,
                    dst,
                );
                if let Some(m) = masks {
                    for (v, &mv) in dst.iter_mut().zip(m.plane(g, k)) {
                        *v *= mv;
                    }
                }
            }
        }
    }
    Ok(stacked)
}

/// 1×1 convolution: `out[o] = Σ_s pw[o, s] · stacked[s]`.
pub fn pointwise_conv(stacked: &FeatureMap, pw: &PointwiseKernel) -> Result<FeatureMap> {
    let s_count = pw.stacked_channels();
    if stacked.channels() != s_count {
        return shape_err(format!(
            "pointwise kernel mixes {s_count} channels, got {}",
            stacked.channels()
        ));
    }
    let mut out = FeatureMap::zeros(pw.out_channels(), stacked.height(), stacked.width())?;
    for o in 0..pw.out_channels() {
        let dst = out.plane_mut(o);
        for s in 0..s_count {
            let wt = pw.weight(o, s);
            for (d, &v) in dst.iter_mut().zip(stacked.plane(s)) {
                *d += wt * v;
            }
        }
    }
    Ok(out)
}

/// `N` separate warps per group followed by a 1×1 convolution over the
/// stacked result. `N` is free; for the classical case pass
/// `kernel_taps(n)` and [`kernel_to_pointwise`] weights.
pub fn decomposed_deform_conv(
    x: &FeatureMap,
    offsets: &OffsetField,
    taps: &[BaseOffset],
    pw: &PointwiseKernel,
    groups: usize,
) -> Result<FeatureMap> {
    pointwise_conv(&stack_warped(x, offsets, None, taps, groups)?, pw)
}

pub fn modulated_decomposed_deform_conv(
    x: &FeatureMap,
    offsets: &OffsetField,
    masks: &MaskField,
    taps: &[BaseOffset],
    pw: &PointwiseKernel,
    groups: usize,
) -> Result<FeatureMap> {
    pointwise_conv(&stack_warped(x, offsets, Some(masks), taps, groups)?, pw)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EquivalenceReport {
    pub max_abs_diff: f64,
    pub pass: bool,
}

impl EquivalenceReport {
    pub fn compare(a: &FeatureMap, b: &FeatureMap) -> Result<Self> {
        let max_abs_diff = a.tensor().max_abs_diff(b.tensor())?;
        Ok(Self {
            max_abs_diff,
            pass: max_abs_diff <= EQUIVALENCE_TOL,
        })
    }
}

/// Runs the direct and the decomposed deformable convolution on the same
/// inputs and reports their largest element-wise difference.
pub fn equivalence_report(
    x: &FeatureMap,
    offsets: &OffsetField,
    kernel: &ConvKernel,
    groups: usize,
) -> Result<EquivalenceReport> {
    let direct = super::deform_conv(x, offsets, kernel, groups)?;
    let pw = kernel_to_pointwise(kernel, groups)?;
    let taps = kernel_taps(kernel.size());
    let decomposed = decomposed_deform_conv(x, offsets, &taps, &pw, groups)?;
    EquivalenceReport::compare(&direct, &decomposed)
}
