//! Alignment of a neighbouring feature map onto a reference.
//!
//! Deformable alignment predicts offsets from both features but convolves
//! only the neighbour; flow-based alignment is the one-offset special case;
//! image alignment is a bare warp with no mixing.

use crate::dcn::{
    conv2d, decomposed_deform_conv, kernel_taps, kernel_to_pointwise,
    modulated_decomposed_deform_conv, zero_taps, ConvKernel, MaskField, OffsetField,
    PointwiseKernel,
};
use crate::error::{shape_err, Result};
use crate::rng::SplitMix64;
use crate::sampling::{warp, BaseOffset};
use crate::tensor::{FeatureMap, FlowField, Tensor};

pub const LEAKY_SLOPE: f64 = 0.1;
pub const DEFAULT_HIDDEN: usize = 16;

/// A three-layer 3×3 convolution stack mapping the concatenated
/// (reference, neighbour) features to offsets and, optionally, masks.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorWeights {
    pub conv1: ConvKernel,
    pub conv2: ConvKernel,
    pub head: ConvKernel,
    groups: usize,
    per_group: usize,
    with_masks: bool,
}

impl PredictorWeights {
    pub fn new(
        conv1: ConvKernel,
        conv2: ConvKernel,
        head: ConvKernel,
        groups: usize,
        per_group: usize,
        with_masks: bool,
    ) -> Result<Self> {
        let expected_head =
            2 * groups * per_group + if with_masks { groups * per_group } else { 0 };
        if !conv1.in_channels().is_multiple_of(2) {
            return shape_err("first predictor layer must read an even channel count (ref ‖ nbr)");
        }
        if conv2.in_channels() != conv1.out_channels() || head.in_channels() != conv2.out_channels()
        {
            return shape_err("predictor layers do not chain");
        }
        if head.out_channels() != expected_head {
            return shape_err(format!(
                "head emits {} channels, expected {expected_head}",
                head.out_channels()
            ));
        }
        if [&conv1, &conv2, &head].iter().any(|k| k.size() != 3) {
            return shape_err("predictor kernels must be 3x3");
        }
        Ok(Self {
            conv1,
            conv2,
            head,
            groups,
            per_group,
            with_masks,
        })
    }

    pub fn zeros(
        channels: usize,
        hidden: usize,
        groups: usize,
        per_group: usize,
        with_masks: bool,
    ) -> Result<Self> {
        let head_out = 2 * groups * per_group + if with_masks { groups * per_group } else { 0 };
        Self::new(
            ConvKernel::zeros(hidden, 2 * channels, 3)?,
            ConvKernel::zeros(hidden, hidden, 3)?,
            ConvKernel::zeros(head_out, hidden, 3)?,
            groups,
            per_group,
            with_masks,
        )
    }

    /// Weights uniform in `[-scale, scale]`.
    pub fn random(
        channels: usize,
        hidden: usize,
        groups: usize,
        per_group: usize,
        with_masks: bool,
        scale: f64,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let mut w = Self::zeros(channels, hidden, groups, per_group, with_masks)?;
        for k in [&mut w.conv1, &mut w.conv2, &mut w.head] {
            rng.fill_uniform(k.tensor_mut().data_mut(), -scale, scale);
        }
        Ok(w)
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn per_group(&self) -> usize {
        self.per_group
    }

    pub fn with_masks(&self) -> bool {
        self.with_masks
    }
}

fn leaky_relu(mut f: FeatureMap) -> FeatureMap {
    for v in f.tensor_mut().data_mut() {
        if *v < 0.0 {
            *v *= LEAKY_SLOPE;
        }
    }
    f
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Predicts offsets (and masks, if the weights carry a mask head) from the
/// channel-wise concatenation of the reference and neighbour features.
pub fn predict_offsets(
    f_ref: &FeatureMap,
    f_nbr: &FeatureMap,
    w: &PredictorWeights,
) -> Result<(OffsetField, Option<MaskField>)> {
    if !f_ref.same_shape(f_nbr) {
        return shape_err(format!(
            "reference {:?} and neighbour {:?} differ in shape",
            f_ref.tensor().dims(),
            f_nbr.tensor().dims()
        ));
    }
    let (c, h, wd) = (f_ref.channels(), f_ref.height(), f_ref.width());
    if w.conv1.in_channels() != 2 * c {
        return shape_err(format!(
            "predictor expects {} input channels, got 2 x {c}",
            w.conv1.in_channels()
        ));
    }
    let mut cat = Vec::with_capacity(2 * c * h * wd);
    cat.extend_from_slice(f_ref.data());
    cat.extend_from_slice(f_nbr.data());
    let x = FeatureMap::from_vec(2 * c, h, wd, cat)?;
    let x = leaky_relu(conv2d(&x, &w.conv1)?);
    let x = leaky_relu(conv2d(&x, &w.conv2)?);
    let out = conv2d(&x, &w.head)?.into_tensor().into_data();

    let (g, n) = (w.groups, w.per_group);
    let n_off = 2 * g * n * h * wd;
    let offsets = OffsetField::new(Tensor::from_vec(&[g, n, 2, h, wd], out[..n_off].to_vec())?)?;
    let masks = if w.with_masks {
        let m = out[n_off..].iter().map(|&z| logistic(z)).collect();
        Some(MaskField::new(Tensor::from_vec(&[g, n, h, wd], m)?)?)
    } else {
        None
    };
    Ok((offsets, masks))
}

/// How the warped copies are mixed back into output channels.
#[derive(Clone, Copy, Debug)]
pub enum Mixing<'a> {
    /// A classical `n × n` kernel; `N` must equal `n²`.
    Kernel(&'a ConvKernel),
    /// Explicit 1×1 weights over the stacked copies with one tap per offset.
    Pointwise {
        weights: &'a PointwiseKernel,
        taps: &'a [BaseOffset],
    },
}

/// Deformable alignment of `f_nbr`. The reference feature only enters
/// through the offsets (and masks) passed in.
pub fn deformable_align(
    f_nbr: &FeatureMap,
    offsets: &OffsetField,
    mixing: Mixing<'_>,
    masks: Option<&MaskField>,
    groups: usize,
) -> Result<FeatureMap> {
    let (pw, taps);
    let (weights, tap_list): (&PointwiseKernel, &[BaseOffset]) = match mixing {
        Mixing::Kernel(k) => {
            if offsets.per_group() != k.taps() {
                return shape_err(format!(
                    "kernel of size {} needs {} offsets per group, got {}",
                    k.size(),
                    k.taps(),
                    offsets.per_group()
                ));
            }
            pw = kernel_to_pointwise(k, groups)?;
            taps = kernel_taps(k.size());
            (&pw, &taps)
        }
        Mixing::Pointwise { weights, taps } => (weights, taps),
    };
    match masks {
        Some(m) => modulated_decomposed_deform_conv(f_nbr, offsets, m, tap_list, weights, groups),
        None => decomposed_deform_conv(f_nbr, offsets, tap_list, weights, groups),
    }
}

/// Flow-based alignment: one warp by `flow`, then a 1×1 convolution.
pub fn flow_align(
    f_nbr: &FeatureMap,
    flow: &FlowField,
    pw: &PointwiseKernel,
) -> Result<FeatureMap> {
    if pw.stacked_channels() != f_nbr.channels() {
        return shape_err(format!(
            "pointwise kernel mixes {} channels, feature has {}",
            pw.stacked_channels(),
            f_nbr.channels()
        ));
    }
    let offsets = OffsetField::broadcast(flow, 1, 1)?;
    decomposed_deform_conv(f_nbr, &offsets, &zero_taps(1), pw, 1)
}

/// Image-level alignment: a plain warp with no learned mixing.
pub fn image_align(image: &FeatureMap, flow: &FlowField) -> Result<FeatureMap> {
    warp(image, flow, BaseOffset::ZERO)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dcn::pointwise_conv;

    fn rand_feature(rng: &mut SplitMix64, c: usize, h: usize, w: usize) -> FeatureMap {
        let mut d = vec![0.0; c * h * w];
        rng.fill_uniform(&mut d, -1.0, 1.0);
        FeatureMap::from_vec(c, h, w, d).unwrap()
    }

    #[test]
    fn zero_predictor_gives_zero_offsets_and_half_masks() {
        let mut rng = SplitMix64::new(1);
        let a = rand_feature(&mut rng, 3, 5, 5);
        let b = rand_feature(&mut rng, 3, 5, 5);
        let w = PredictorWeights::zeros(3, DEFAULT_HIDDEN, 2, 4, true).unwrap();
        let (off, masks) = predict_offsets(&a, &b, &w).unwrap();
        assert!(off.data().iter().all(|&v| v == 0.0));
        assert!(masks.unwrap().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn predictor_output_shape_and_order_sensitivity() {
        let mut rng = SplitMix64::new(2);
        let a = rand_feature(&mut rng, 2, 6, 4);
        let b = rand_feature(&mut rng, 2, 6, 4);
        for &(g, n) in &[(1, 1), (2, 3), (1, 9)] {
            let w = PredictorWeights::random(2, 8, g, n, false, 0.3, &mut rng).unwrap();
            let (off, masks) = predict_offsets(&a, &b, &w).unwrap();
            assert_eq!(off.tensor().dims(), &[g, n, 2, 6, 4]);
            assert!(masks.is_none());
            assert!(off.tensor().is_finite());
            let (swapped, _) = predict_offsets(&b, &a, &w).unwrap();
            assert_ne!(off, swapped);
        }
        // Weights symmetric in the two halves make the order irrelevant.
        let mut w = PredictorWeights::random(2, 4, 1, 1, false, 0.3, &mut rng).unwrap();
        let taps = 9;
        let data = w.conv1.tensor_mut().data_mut();
        for o in 0..4 {
            for c in 0..2 {
                for k in 0..taps {
                    data[(o * 4 + c + 2) * taps + k] = data[(o * 4 + c) * taps + k];
                }
            }
        }
        let (x, _) = predict_offsets(&a, &b, &w).unwrap();
        let (y, _) = predict_offsets(&b, &a, &w).unwrap();
        assert!(x.tensor().max_abs_diff(y.tensor()).unwrap() <= 1e-12);
    }

    #[test]
    fn predictor_rejects_mismatched_features() {
        let w = PredictorWeights::zeros(2, 4, 1, 1, false).unwrap();
        let a = FeatureMap::zeros(2, 4, 4).unwrap();
        let b = FeatureMap::zeros(2, 4, 5).unwrap();
        assert!(predict_offsets(&a, &b, &w).is_err());
        assert!(PredictorWeights::new(
            ConvKernel::zeros(4, 4, 3).unwrap(),
            ConvKernel::zeros(4, 4, 3).unwrap(),
            ConvKernel::zeros(3, 4, 3).unwrap(),
            1,
            1,
            false
        )
        .is_err());
    }

    #[test]
    fn zero_offsets_identity_weights_is_identity() {
        let mut rng = SplitMix64::new(3);
        let f = rand_feature(&mut rng, 3, 4, 4);
        let off = OffsetField::zeros(1, 1, 4, 4).unwrap();
        let pw = PointwiseKernel::identity(3).unwrap();
        let taps = zero_taps(1);
        let out = deformable_align(
            &f,
            &off,
            Mixing::Pointwise {
                weights: &pw,
                taps: &taps,
            },
            None,
            1,
        )
        .unwrap();
        assert_eq!(out, f);
    }

    #[test]
    fn integer_translation_is_undone() {
        let mut rng = SplitMix64::new(4);
        let (c, h, w) = (2, 8, 8);
        let f_ref = rand_feature(&mut rng, c, h, w);
        let (sx, sy) = (2i64, -1i64);
        // nbr(q) = ref(q - s)
        let mut nbr = FeatureMap::zeros(c, h, w).unwrap();
        for ch in 0..c {
            for i in 0..h as i64 {
                for j in 0..w as i64 {
                    let (si, sj) = (i - sy, j - sx);
                    if si >= 0 && sj >= 0 && si < h as i64 && sj < w as i64 {
                        nbr.plane_mut(ch)[(i * w as i64 + j) as usize] =
                            f_ref.plane(ch)[(si * w as i64 + sj) as usize];
                    }
                }
            }
        }
        let flow = FlowField::constant(h, w, sx as f64, sy as f64).unwrap();
        let off = OffsetField::broadcast(&flow, 1, 1).unwrap();
        let pw = PointwiseKernel::identity(c).unwrap();
        let taps = zero_taps(1);
        let out = deformable_align(
            &nbr,
            &off,
            Mixing::Pointwise {
                weights: &pw,
                taps: &taps,
            },
            None,
            1,
        )
        .unwrap();
        for ch in 0..c {
            for i in 0..h as i64 {
                for j in 0..w as i64 {
                    if i + sy >= 0 && i + sy < h as i64 && j + sx >= 0 && j + sx < w as i64 {
                        let p = (i * w as i64 + j) as usize;
                        assert_eq!(out.plane(ch)[p], f_ref.plane(ch)[p]);
                    }
                }
            }
        }
    }

    #[test]
    fn binary_masks_select_paths() {
        let mut rng = SplitMix64::new(5);
        let (c, h, w) = (2, 5, 5);
        let f = rand_feature(&mut rng, c, h, w);
        let mut od = vec![0.0; 2 * 2 * h * w];
        rng.fill_uniform(&mut od, -2.0, 2.0);
        let off = OffsetField::new(Tensor::from_vec(&[1, 2, 2, h, w], od).unwrap()).unwrap();
        let md: Vec<f64> = (0..2 * h * w)
            .map(|_| (rng.next_f64() < 0.5) as u8 as f64)
            .collect();
        let masks = MaskField::new(Tensor::from_vec(&[1, 2, h, w], md).unwrap()).unwrap();
        let mut pd = vec![0.0; 3 * 2 * c];
        rng.fill_uniform(&mut pd, -1.0, 1.0);
        let pw = PointwiseKernel::from_vec(3, 2 * c, pd.clone()).unwrap();
        let taps = zero_taps(2);
        let got = deformable_align(
            &f,
            &off,
            Mixing::Pointwise {
                weights: &pw,
                taps: &taps,
            },
            Some(&masks),
            1,
        )
        .unwrap();

        let mut expected = FeatureMap::zeros(3, h, w).unwrap();
        for k in 0..2 {
            let warped = warp(&f, &off.displacement(0, k).unwrap(), BaseOffset::ZERO).unwrap();
            let block: Vec<f64> = (0..3)
                .flat_map(|o| pd[o * 2 * c + k * c..o * 2 * c + (k + 1) * c].to_vec())
                .collect();
            let path =
                pointwise_conv(&warped, &PointwiseKernel::from_vec(3, c, block).unwrap()).unwrap();
            for o in 0..3 {
                for p in 0..h * w {
                    expected.plane_mut(o)[p] += masks.plane(0, k)[p] * path.plane(o)[p];
                }
            }
        }
        assert!(got.tensor().max_abs_diff(expected.tensor()).unwrap() <= 1e-13);
    }

    #[test]
    fn kernel_mixing_matches_direct_dcn() {
        let mut rng = SplitMix64::new(6);
        let f = rand_feature(&mut rng, 4, 6, 6);
        let mut od = vec![0.0; 2 * 9 * 2 * 36];
        rng.fill_uniform(&mut od, -2.0, 2.0);
        let off = OffsetField::new(Tensor::from_vec(&[2, 9, 2, 6, 6], od).unwrap()).unwrap();
        let mut kd = vec![0.0; 3 * 4 * 9];
        rng.fill_uniform(&mut kd, -1.0, 1.0);
        let k = ConvKernel::from_vec(3, 4, 3, kd).unwrap();
        let a = deformable_align(&f, &off, Mixing::Kernel(&k), None, 2).unwrap();
        let b = crate::dcn::deform_conv(&f, &off, &k, 2).unwrap();
        assert!(a.tensor().max_abs_diff(b.tensor()).unwrap() <= 1e-12);
        let wrong = OffsetField::zeros(2, 4, 6, 6).unwrap();
        assert!(deformable_align(&f, &wrong, Mixing::Kernel(&k), None, 2).is_err());
    }

    #[test]
    fn reference_feature_enters_only_through_offsets() {
        let mut rng = SplitMix64::new(7);
        let f_ref = rand_feature(&mut rng, 2, 6, 6);
        let f_nbr = rand_feature(&mut rng, 2, 6, 6);
        let w = PredictorWeights::random(2, 4, 1, 2, true, 0.2, &mut rng).unwrap();
        let (off, masks) = predict_offsets(&f_ref, &f_nbr, &w).unwrap();
        let pw =
            PointwiseKernel::from_vec(2, 4, vec![0.5, 0.1, 0.2, -0.3, 0.0, 0.4, 0.3, 0.2]).unwrap();
        let taps = zero_taps(2);
        let mix = Mixing::Pointwise {
            weights: &pw,
            taps: &taps,
        };
        let before = deformable_align(&f_nbr, &off, mix, masks.as_ref(), 1).unwrap();

        let perturbed = rand_feature(&mut rng, 2, 6, 6);
        let (off2, _) = predict_offsets(&perturbed, &f_nbr, &w).unwrap();
        assert_ne!(off, off2);
        // Cached offsets: the pipeline output does not move.
        let after = deformable_align(&f_nbr, &off, mix, masks.as_ref(), 1).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn flow_align_is_single_offset_decomposition() {
        let mut rng = SplitMix64::new(8);
        let f = rand_feature(&mut rng, 3, 5, 6);
        let mut fd = vec![0.0; 2 * 30];
        rng.fill_uniform(&mut fd, -2.0, 2.0);
        let flow = FlowField::new(Tensor::from_vec(&[2, 5, 6], fd).unwrap()).unwrap();
        let mut pd = vec![0.0; 2 * 3];
        rng.fill_uniform(&mut pd, -1.0, 1.0);
        let pw = PointwiseKernel::from_vec(2, 3, pd).unwrap();
        let a = flow_align(&f, &flow, &pw).unwrap();
        let off = OffsetField::broadcast(&flow, 1, 1).unwrap();
        let b = decomposed_deform_conv(&f, &off, &[BaseOffset::ZERO], &pw, 1).unwrap();
        assert_eq!(a, b);
        let id = PointwiseKernel::identity(3).unwrap();
        assert_eq!(
            flow_align(&f, &FlowField::zeros(5, 6).unwrap(), &id).unwrap(),
            f
        );
    }

    #[test]
    fn half_pixel_flow_on_ramp() {
        let (h, w) = (3, 6);
        let ramp: Vec<f64> = (0..h * w).map(|p| (p % w) as f64).collect();
        let f = FeatureMap::from_vec(1, h, w, ramp).unwrap();
        let flow = FlowField::constant(h, w, 0.5, 0.0).unwrap();
        let out = flow_align(&f, &flow, &PointwiseKernel::identity(1).unwrap()).unwrap();
        for i in 0..h {
            for j in 0..w {
                // Interior: midpoint of the ramp; last column half-fades into padding.
                let expected = if j + 1 < w {
                    j as f64 + 0.5
                } else {
                    0.5 * j as f64
                };
                assert_eq!(out.plane(0)[i * w + j], expected);
            }
        }
    }

    #[test]
    fn image_align_cases() {
        let mut rng = SplitMix64::new(9);
        let img = rand_feature(&mut rng, 1, 4, 4);
        assert_eq!(
            image_align(&img, &FlowField::zeros(4, 4).unwrap()).unwrap(),
            img
        );
        let shifted = image_align(&img, &FlowField::constant(4, 4, 0.0, 1.0).unwrap()).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expected = if i < 3 {
                    img.plane(0)[(i + 1) * 4 + j]
                } else {
                    0.0
                };
                assert_eq!(shifted.plane(0)[i * 4 + j], expected);
            }
        }
        // Fractional warps attenuate a checkerboard.
        let board: Vec<f64> = (0..64)
            .map(|p| if (p / 8 + p % 8) % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        let board = FeatureMap::from_vec(1, 8, 8, board).unwrap();
        let smooth = image_align(&board, &FlowField::constant(8, 8, 0.3, 0.0).unwrap()).unwrap();
        let peak = smooth.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(peak < 1.0);
        assert!(image_align(&board, &FlowField::zeros(4, 8).unwrap()).is_err());
    }
}
