//! Analytic backward passes and a central-difference checker.
//!
//! At integer sample coordinates the bilinear kernel has a kink; the
//! coordinate derivative there is taken from the cell below the coordinate
//! (the left limit).

use crate::dcn::{check_groups, stack_warped, ConvKernel, MaskField, OffsetField, PointwiseKernel};
use crate::error::{input_err, shape_err, Error, Result};
use crate::sampling::{source_coord, BaseOffset, Cell, Displacement};
use crate::tensor::{FeatureMap, FlowField, Tensor};

/// Gradients of a decomposed (optionally modulated) deformable convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct GradBundle {
    pub grad_input: FeatureMap,
    /// Shaped like the offsets, `(G, N, 2, H, W)`.
    pub grad_offsets: Tensor,
    /// Shaped like the pointwise kernel, `(C_out, S, 1, 1)`.
    pub grad_kernel: Tensor,
    /// Shaped like the masks, present only for a modulated forward pass.
    pub grad_masks: Option<Tensor>,
}

/// Adjoint of `warp_plane` for one plane; accumulates into the outputs.
#[allow(clippy::too_many_arguments)]
pub(crate) fn warp_plane_backward(
    grad_out: &[f64],
    src: &[f64],
    height: usize,
    width: usize,
    dx: &[f64],
    dy: &[f64],
    base: BaseOffset,
    grad_src: &mut [f64],
    grad_dx: &mut [f64],
    grad_dy: &mut [f64],
) {
    for i in 0..height {
        for j in 0..width {
            let p = i * width + j;
            let g = grad_out[p];
            if g == 0.0 {
                continue;
            }
            let (y, x) = source_coord(i, j, base, dy[p], dx[p]);
            let Some(cell) = Cell::locate(y, x, height, width, true) else {
                continue;
            };
            let corners = cell.corners(height, width);
            let weights = cell.weights();
            for (c, wt) in corners.iter().zip(weights) {
                if let Some(idx) = c {
                    grad_src[*idx] += g * wt;
                }
            }
            let v = corners.map(|c| c.map_or(0.0, |idx| src[idx]));
            let (fy, fx) = (cell.fy, cell.fx);
            grad_dy[p] += g * ((1.0 - fx) * (v[2] - v[0]) + fx * (v[3] - v[1]));
            grad_dx[p] += g * ((1.0 - fy) * (v[1] - v[0]) + fy * (v[3] - v[2]));
        }
    }
}

/// Gradients of `warp(feature, disp, base)` with respect to the feature and
/// the displacement, given the gradient of the warped output.
pub fn warp_backward(
    grad_out: &FeatureMap,
    feature: &FeatureMap,
    disp: &Displacement,
    base: BaseOffset,
) -> Result<(FeatureMap, Displacement)> {
    let (h, w) = (feature.height(), feature.width());
    if !grad_out.same_shape(feature) || disp.height() != h || disp.width() != w {
        return shape_err("warp_backward: gradient, feature and displacement shapes disagree");
    }
    let hw = h * w;
    let mut grad_feature = FeatureMap::zeros(feature.channels(), h, w)?;
    let mut grad_disp = vec![0.0; 2 * hw];
    let (gdx, gdy) = grad_disp.split_at_mut(hw);
    for c in 0..feature.channels() {
        warp_plane_backward(
            grad_out.plane(c),
            feature.plane(c),
            h,
            w,
            disp.dx(),
            disp.dy(),
            base,
            grad_feature.plane_mut(c),
            gdx,
            gdy,
        );
    }
    Ok((
        grad_feature,
        FlowField::new(Tensor::from_vec(&[2, h, w], grad_disp)?)?,
    ))
}

/// Gradients of `conv2d(x, kernel)` with respect to `x` and the kernel.
pub fn conv_backward(
    grad_out: &FeatureMap,
    x: &FeatureMap,
    kernel: &ConvKernel,
) -> Result<(FeatureMap, Tensor)> {
    let (h, w) = (x.height(), x.width());
    if kernel.in_channels() != x.channels()
        || grad_out.channels() != kernel.out_channels()
        || grad_out.height() != h
        || grad_out.width() != w
    {
        return shape_err("conv_backward: gradient, input and kernel shapes disagree");
    }
    let n = kernel.size();
    let nk = n * n;
    let r = (n / 2) as isize;
    let mut grad_x = FeatureMap::zeros(x.channels(), h, w)?;
    let mut grad_k = Tensor::zeros(kernel.tensor().dims())?;
    let gk = grad_k.data_mut();
    for o in 0..kernel.out_channels() {
        let go = grad_out.plane(o);
        for c in 0..x.channels() {
            let src = x.plane(c);
            for k in 0..nk {
                let wt = kernel.weight(o, c, k);
                let oy = (k / n) as isize - r;
                let ox = (k % n) as isize - r;
                let mut acc = 0.0;
                let gx = grad_x.plane_mut(c);
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
                        let s = sy as usize * w + sx as usize;
                        let g = go[i * w + j];
                        gx[s] += wt * g;
                        acc += g * src[s];
                    }
                }
                gk[(o * x.channels() + c) * nk + k] += acc;
            }
        }
    }
    Ok((grad_x, grad_k))
}

/// Backward pass through the decomposition: the 1×1 mix first, then each
/// warp. With `masks`, also returns the mask gradient.
pub fn dcn_backward(
    grad_out: &FeatureMap,
    x: &FeatureMap,
    offsets: &OffsetField,
    masks: Option<&MaskField>,
    taps: &[BaseOffset],
    pw: &PointwiseKernel,
    groups: usize,
) -> Result<GradBundle> {
    let (h, w) = (x.height(), x.width());
    let hw = h * w;
    let raw = stack_warped(x, offsets, None, taps, groups)?;
    let cg = check_groups(x.channels(), groups)?;
    let n = offsets.per_group();
    let s_count = raw.channels();
    if pw.stacked_channels() != s_count {
        return shape_err(format!(
            "pointwise kernel mixes {} channels, decomposition stacks {s_count}",
            pw.stacked_channels()
        ));
    }
    if grad_out.channels() != pw.out_channels() || grad_out.height() != h || grad_out.width() != w {
        return shape_err("dcn_backward: output gradient shape disagrees with the forward pass");
    }

    // Mixing layer.
    let mut grad_kernel = Tensor::zeros(pw.tensor().dims())?;
    let mut grad_stacked = vec![0.0; s_count * hw];
    {
        let gk = grad_kernel.data_mut();
        for o in 0..pw.out_channels() {
            let go = grad_out.plane(o);
            for s in 0..s_count {
                let m_plane = masks.map(|m| m.plane(s / (n * cg), (s / cg) % n));
                let sp = raw.plane(s);
                let mut acc = 0.0;
                for p in 0..hw {
                    let v = match m_plane {
                        Some(mp) => sp[p] * mp[p],
                        None => sp[p],
                    };
                    acc += go[p] * v;
                }
                gk[o * s_count + s] = acc;
                let wt = pw.weight(o, s);
                for (gs, &g) in grad_stacked[s * hw..(s + 1) * hw].iter_mut().zip(go) {
                    *gs += wt * g;
                }
            }
        }
    }

    // Warps.
    let mut grad_input = FeatureMap::zeros(x.channels(), h, w)?;
    let mut grad_offsets = Tensor::zeros(offsets.tensor().dims())?;
    let mut grad_masks = masks
        .map(|m| Tensor::zeros(m.tensor().dims()))
        .transpose()?;
    let mut scaled = vec![0.0; hw];
    for g in 0..groups {
        for (k, &tap) in taps.iter().enumerate() {
            let base = ((g * n + k) * 2) * hw;
            let (gdx, gdy) = grad_offsets.data_mut()[base..base + 2 * hw].split_at_mut(hw);
            for l in 0..cg {
                let s = (g * n + k) * cg + l;
                let gs = &grad_stacked[s * hw..(s + 1) * hw];
                let upstream: &[f64] = match (masks, grad_masks.as_mut()) {
                    (Some(m), Some(gm)) => {
                        let mp = m.plane(g, k);
                        let gmp = &mut gm.data_mut()[(g * n + k) * hw..(g * n + k + 1) * hw];
                        let rp = raw.plane(s);
                        for p in 0..hw {
                            gmp[p] += rp[p] * gs[p];
                            scaled[p] = gs[p] * mp[p];
                        }
                        &scaled
                    }
                    _ => gs,
                };
                warp_plane_backward(
                    upstream,
                    x.plane(g * cg + l),
                    h,
                    w,
                    offsets.dx(g, k),
                    offsets.dy(g, k),
                    tap,
                    grad_input.plane_mut(g * cg + l),
                    gdx,
                    gdy,
                );
            }
        }
    }

    Ok(GradBundle {
        grad_input,
        grad_offsets,
        grad_kernel,
        grad_masks,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_err: f64,
    /// Coordinate where the largest relative error occurred.
    pub worst_index: usize,
    pub pass: bool,
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `forward` around
/// `params`, one coordinate at a time.
pub fn finite_diff_check<F>(
    mut forward: F,
    params: &[f64],
    analytic: &[f64],
    h: f64,
    tol: f64,
) -> Result<FdReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return input_err(format!("finite-difference step must be positive, got {h}"));
    }
    if params.len() != analytic.len() {
        return shape_err(format!(
            "{} parameters but {} analytic gradient entries",
            params.len(),
            analytic.len()
        ));
    }
    let mut eval = |v: &[f64]| -> Result<f64> {
        let f = forward(v)?;
        if !f.is_finite() {
            return Err(Error::Evaluation(format!("forward returned {f}")));
        }
        Ok(f)
    };
    let mut probe = params.to_vec();
    let mut max_rel_err = 0.0f64;
    let mut worst_index = 0;
    for i in 0..params.len() {
        probe[i] = params[i] + h;
        let plus = eval(&probe)?;
        probe[i] = params[i] - h;
        let minus = eval(&probe)?;
        probe[i] = params[i];
        let numeric = (plus - minus) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        if err > max_rel_err {
            max_rel_err = err;
            worst_index = i;
        }
    }
    Ok(FdReport {
        max_rel_err,
        worst_index,
        pass: max_rel_err <= tol,
    })
}
