use super::{check_groups, kernel_taps, ConvKernel, MaskField, OffsetField};
use crate::error::{shape_err, Result};
use crate::sampling::warp_plane;
use crate::tensor::FeatureMap;

/// Stride-1 cross-correlation with `(n - 1) / 2` zero padding.
pub fn conv2d(x: &FeatureMap, kernel: &ConvKernel) -> Result<FeatureMap> {
    if kernel.in_channels() != x.channels() {
        return shape_err(format!(
            "kernel expects {} input channels, feature has {}",
            kernel.in_channels(),
            x.channels()
        ));
    }
    let (h, w) = (x.height(), x.width());
    let n = kernel.size();
    let r = (n / 2) as isize;
    let mut out = FeatureMap::zeros(kernel.out_channels(), h, w)?;
    for o in 0..kernel.out_channels() {
        let dst = out.plane_mut(o);
        for c in 0..x.channels() {
            let src = x.plane(c);
            for k in 0..n * n {
                let wt = kernel.weight(o, c, k);
                let oy = (k / n) as isize - r;
                let ox = (k % n) as isize - r;
                for i in 0..h {
                    let sy = i as isize + oy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for j in 0..w {
                        let sx = j as isize + ox;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        dst[i * w + j] += wt * src[sy as usize * w + sx as usize];
                    }
                }
            }
        }
    }
    Ok(out)
}

fn validate(
    x: &FeatureMap,
    offsets: &OffsetField,
    kernel: &ConvKernel,
    groups: usize,
) -> Result<usize> {
    if kernel.in_channels() != x.channels() {
        return shape_err(format!(
            "kernel expects {} input channels, feature has {}",
            kernel.in_channels(),
            x.channels()
        ));
    }
    let per_group = check_groups(x.channels(), groups)?;
    if offsets.groups() != groups {
        return shape_err(format!(
            "offsets carry {} groups, convolution uses {groups}",
            offsets.groups()
        ));
    }
    if offsets.per_group() != kernel.taps() {
        return shape_err(format!(
            "deformable convolution needs N == n² = {}, offsets have N = {}",
            kernel.taps(),
            offsets.per_group()
        ));
    }
    if offsets.height() != x.height() || offsets.width() != x.width() {
        return shape_err("offset spatial size differs from the feature");
    }
    Ok(per_group)
}

fn deform_forward(
    x: &FeatureMap,
    offsets: &OffsetField,
    masks: Option<&MaskField>,
    kernel: &ConvKernel,
    groups: usize,
) -> Result<FeatureMap> {
    let per_group = validate(x, offsets, kernel, groups)?;
    if let Some(m) = masks {
        m.check_against(offsets)?;
    }
    let (h, w) = (x.height(), x.width());
    let hw = h * w;
    let taps = kernel_taps(kernel.size());
    let nk = taps.len();
    let rows = x.channels() * nk;

    // Sampled columns, row index c·n² + k, matching the kernel's flat layout.
    let mut cols = vec![0.0; rows * hw];
    for c in 0..x.channels() {
        let g = c / per_group;
        for (k, &tap) in taps.iter().enumerate() {
            let row = &mut cols[(c * nk + k) * hw..(c * nk + k + 1) * hw];
            warp_plane(
                x.plane(c),
                h,
                w,
                offsets.dx(g, k),
                offsets.dy(g, k),
                tap,
                row,
            );
            if let Some(m) = masks {
                for (v, &mv) in row.iter_mut().zip(m.plane(g, k)) {
                    *v *= mv;
                }
            }
        }
    }

    let mut out = FeatureMap::zeros(kernel.out_channels(), h, w)?;
    let weights = kernel.data();
    for o in 0..kernel.out_channels() {
        let dst = out.plane_mut(o);
        for r in 0..rows {
            let wt = weights[o * rows + r];
            for (d, &s) in dst.iter_mut().zip(&cols[r * hw..(r + 1) * hw]) {
                *d += wt * s;
            }
        }
    }
    Ok(out)
}

/// `y(p) = Σ_k w(p_k) · x(p + p_k + Δp_k)` with bilinear sampling, one
/// offset set per deformable group.
pub fn deform_conv(
    x: &FeatureMap,
    offsets: &OffsetField,
    kernel: &ConvKernel,
    groups: usize,
) -> Result<FeatureMap> {
    deform_forward(x, offsets, None, kernel, groups)
}

/// Deformable convolution with every sampled value scaled by its mask.
pub fn modulated_deform_conv(
    x: &FeatureMap,
    offsets: &OffsetField,
    masks: &MaskField,
    kernel: &ConvKernel,
    groups: usize,
) -> Result<FeatureMap> {
    deform_forward(x, offsets, Some(masks), kernel, groups)
}
