//! Charbonnier data loss and the thresholded offset-fidelity penalty.
//!
//! The fidelity term compares every offset of every group against the same
//! flow, one displacement component at a time:
//!
//! ```text
//! L_fid = λ · Σ_{g,n} Σ_{i,j} Σ_{dx,dy} H(|o - f| - t) · |o - f|
//! ```
//!
//! with `H(z) = 1` for `z > 0` and `0` otherwise, so a deviation of exactly
//! `t` costs nothing.

use crate::dcn::OffsetField;
use crate::error::{input_err, shape_err, Result};
use crate::tensor::{FlowField, Tensor};

pub const DEFAULT_CHARBONNIER_EPS: f64 = 1e-3;

/// How the fidelity sum is normalised.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Reduction {
    #[default]
    Sum,
    /// Divide the sum by the number of pixels `H·W`.
    MeanOverPixels,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FidelityConfig {
    lambda: f64,
    t: f64,
    reduction: Reduction,
}

impl FidelityConfig {
    pub fn new(lambda: f64, t: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return input_err(format!(
                "lambda must be a finite non-negative number, got {lambda}"
            ));
        }
        if !(t >= 0.0) || !t.is_finite() {
            return input_err(format!(
                "threshold must be a finite non-negative number, got {t}"
            ));
        }
        Ok(Self {
            lambda,
            t,
            reduction: Reduction::Sum,
        })
    }

    pub fn with_reduction(self, reduction: Reduction) -> Self {
        Self { reduction, ..self }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn reduction(&self) -> Reduction {
        self.reduction
    }

    fn scale(&self, pixels: usize) -> f64 {
        match self.reduction {
            Reduction::Sum => self.lambda,
            Reduction::MeanOverPixels => self.lambda / pixels as f64,
        }
    }
}

/// `Σ sqrt((pred - target)² + eps²)`.
pub fn charbonnier(pred: &Tensor, target: &Tensor, eps: f64) -> Result<f64> {
    if pred.dims() != target.dims() {
        return shape_err(format!(
            "prediction {:?} and target {:?} differ in shape",
            pred.dims(),
            target.dims()
        ));
    }
    if !(eps >= 0.0) {
        return input_err(format!("eps must be non-negative, got {eps}"));
    }
    let eps2 = eps * eps;
    let mut acc = 0.0;
    for (p, t) in pred.data().iter().zip(target.data()) {
        let d = p - t;
        acc += (d * d + eps2).sqrt();
    }
    Ok(acc)
}

/// Gradient of [`charbonnier`] with respect to `pred`. Where the difference
/// and `eps` are both zero the (undefined) derivative is taken as zero.
pub fn charbonnier_grad(pred: &Tensor, target: &Tensor, eps: f64) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return shape_err("prediction and target differ in shape");
    }
    let eps2 = eps * eps;
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| {
            let d = p - t;
            let r = (d * d + eps2).sqrt();
            if r == 0.0 {
                0.0
            } else {
                d / r
            }
        })
        .collect();
    Tensor::from_vec(pred.dims(), data)
}

/// Step function with `H(0) = 0`.
pub fn heaviside(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        0.0
    }
}

fn check_spatial(offsets: &OffsetField, flow: &FlowField) -> Result<()> {
    if offsets.height() != flow.height() || offsets.width() != flow.width() {
        return shape_err(format!(
            "offsets {}x{} and flow {}x{} differ in size",
            offsets.height(),
            offsets.width(),
            flow.height(),
            flow.width()
        ));
    }
    Ok(())
}

/// Thresholded L1 distance of every offset to the flow, scaled by λ.
pub fn offset_fidelity(
    offsets: &OffsetField,
    flow: &FlowField,
    cfg: &FidelityConfig,
) -> Result<f64> {
    check_spatial(offsets, flow)?;
    let t = cfg.t();
    let mut acc = 0.0;
    for g in 0..offsets.groups() {
        for k in 0..offsets.per_group() {
            for (comp, target) in [flow.dx(), flow.dy()].into_iter().enumerate() {
                for (&o, &f) in offsets.component(g, k, comp).iter().zip(target) {
                    let dev = (o - f).abs();
                    acc += heaviside(dev - t) * dev;
                }
            }
        }
    }
    Ok(cfg.scale(flow.height() * flow.width()) * acc)
}

/// Subgradient of [`offset_fidelity`]: `λ·sign(o - f)` outside the band,
/// zero inside it. The step itself is not differentiated.
pub fn offset_fidelity_grad(
    offsets: &OffsetField,
    flow: &FlowField,
    cfg: &FidelityConfig,
) -> Result<Tensor> {
    check_spatial(offsets, flow)?;
    let scale = cfg.scale(flow.height() * flow.width());
    let t = cfg.t();
    let mut grad = Tensor::zeros(offsets.tensor().dims())?;
    let hw = flow.height() * flow.width();
    let data = grad.data_mut();
    for g in 0..offsets.groups() {
        for k in 0..offsets.per_group() {
            for (comp, target) in [flow.dx(), flow.dy()].into_iter().enumerate() {
                let base = ((g * offsets.per_group() + k) * 2 + comp) * hw;
                for (p, (&o, &f)) in offsets.component(g, k, comp).iter().zip(target).enumerate() {
                    let d = o - f;
                    if d.abs() > t {
                        data[base + p] = scale * d.signum();
                    }
                }
            }
        }
    }
    Ok(grad)
}

/// Data term plus the (already λ-scaled) fidelity term.
pub fn total_loss(data: f64, fidelity: f64) -> f64 {
    data + fidelity
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradients::finite_diff_check;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    fn offsets_from(g: usize, n: usize, h: usize, w: usize, data: Vec<f64>) -> OffsetField {
        OffsetField::new(Tensor::from_vec(&[g, n, 2, h, w], data).unwrap()).unwrap()
    }

    #[test]
    fn charbonnier_cases() {
        let a = Tensor::new(&[4], 0.7).unwrap();
        assert!((charbonnier(&a, &a, 1e-3).unwrap() - 4e-3).abs() < 1e-18);
        let p = Tensor::from_vec(&[1], vec![3.0]).unwrap();
        let t = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        assert_eq!(charbonnier(&p, &t, 0.0).unwrap(), 3.0);
        let p = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        assert_eq!(charbonnier(&p, &t, 1e-3).unwrap(), (1.0f64 + 1e-6).sqrt());
        assert!(charbonnier(&p, &Tensor::zeros(&[2]).unwrap(), 1e-3).is_err());
    }

    #[test]
    fn charbonnier_gradient_matches_finite_differences() {
        let mut rng = SplitMix64::new(10);
        let mut p = vec![0.0; 12];
        let mut t = vec![0.0; 12];
        rng.fill_uniform(&mut p, -1.0, 1.0);
        rng.fill_uniform(&mut t, -1.0, 1.0);
        let target = Tensor::from_vec(&[12], t).unwrap();
        let pred = Tensor::from_vec(&[12], p.clone()).unwrap();
        let g = charbonnier_grad(&pred, &target, 1e-3).unwrap();
        let rep = finite_diff_check(
            |v| charbonnier(&Tensor::from_vec(&[12], v.to_vec())?, &target, 1e-3),
            &p,
            g.data(),
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(rep.pass, "{rep:?}");
    }

    #[test]
    fn heaviside_boundary() {
        assert_eq!(heaviside(1.0), 1.0);
        assert_eq!(heaviside(-1.0), 0.0);
        assert_eq!(heaviside(0.0), 0.0);
    }

    #[test]
    fn fidelity_zero_cases() {
        let flow = FlowField::constant(3, 3, 1.5, -0.5).unwrap();
        let cfg = FidelityConfig::new(1.0, 0.5).unwrap();
        let same = OffsetField::broadcast(&flow, 2, 3).unwrap();
        assert_eq!(offset_fidelity(&same, &flow, &cfg).unwrap(), 0.0);
        let near =
            OffsetField::broadcast(&FlowField::constant(3, 3, 1.9, -0.1).unwrap(), 2, 3).unwrap();
        assert_eq!(offset_fidelity(&near, &flow, &cfg).unwrap(), 0.0);
        assert!(offset_fidelity_grad(&near, &flow, &cfg)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn fidelity_single_pixel() {
        let flow = FlowField::constant(1, 1, 0.25, 0.0).unwrap();
        let off = offsets_from(1, 1, 1, 1, vec![2.25, 0.0]);
        let cfg = FidelityConfig::new(0.5, 1.0).unwrap();
        assert_eq!(offset_fidelity(&off, &flow, &cfg).unwrap(), 1.0);
        let g = offset_fidelity_grad(&off, &flow, &cfg).unwrap();
        assert_eq!(g.data(), &[0.5, 0.0]);
    }

    #[test]
    fn deviation_of_exactly_t_is_free() {
        let flow = FlowField::zeros(1, 1).unwrap();
        let off = offsets_from(1, 1, 1, 1, vec![2.0, -2.0]);
        let cfg = FidelityConfig::new(1.0, 2.0).unwrap();
        assert_eq!(offset_fidelity(&off, &flow, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn mean_reduction_divides_by_pixels() {
        let flow = FlowField::zeros(2, 2).unwrap();
        let off =
            OffsetField::broadcast(&FlowField::constant(2, 2, 3.0, 0.0).unwrap(), 1, 1).unwrap();
        let sum = FidelityConfig::new(1.0, 1.0).unwrap();
        let mean = sum.with_reduction(Reduction::MeanOverPixels);
        assert_eq!(offset_fidelity(&off, &flow, &sum).unwrap(), 12.0);
        assert_eq!(offset_fidelity(&off, &flow, &mean).unwrap(), 3.0);
    }

    #[test]
    fn config_validation() {
        assert!(FidelityConfig::new(-1.0, 1.0).is_err());
        assert!(FidelityConfig::new(1.0, -1.0).is_err());
        assert!(FidelityConfig::new(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn total_is_a_sum() {
        assert_eq!(total_loss(1.0, 0.0), 1.0);
        assert_eq!(total_loss(0.0, 2.5), 2.5);
        assert_eq!(total_loss(1.25, 0.75), 2.0);
    }

    #[test]
    fn fidelity_gradient_matches_finite_differences() {
        let mut rng = SplitMix64::new(12);
        let (g, n, h, w) = (2, 2, 3, 3);
        let t = 1.0;
        let mut flow = vec![0.0; 2 * h * w];
        rng.fill_uniform(&mut flow, -2.0, 2.0);
        let flow = FlowField::new(Tensor::from_vec(&[2, h, w], flow).unwrap()).unwrap();
        let fl = flow.tensor().data().to_vec();
        // Deviations at least 0.05 from 0 and from ±t.
        let mut od = Vec::new();
        for _ in 0..g * n {
            for q in 0..2 * h * w {
                let mag = loop {
                    let m = rng.uniform(0.0, 3.0);
                    if m >= 0.05 && (m - t).abs() >= 0.05 {
                        break m;
                    }
                };
                let sign = if rng.next_f64() < 0.5 { -1.0 } else { 1.0 };
                od.push(fl[q] + sign * mag);
            }
        }
        let cfg = FidelityConfig::new(0.7, t).unwrap();
        let off = offsets_from(g, n, h, w, od.clone());
        let grad = offset_fidelity_grad(&off, &flow, &cfg).unwrap();
        let rep = finite_diff_check(
            |v| offset_fidelity(&offsets_from(g, n, h, w, v.to_vec()), &flow, &cfg),
            &od,
            grad.data(),
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(rep.pass, "{rep:?}");
    }

    fn field_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (
            prop::collection::vec(-5.0f64..5.0, 2 * 2 * 2 * 3 * 3),
            prop::collection::vec(-5.0f64..5.0, 2 * 3 * 3),
        )
    }

    proptest! {
        #[test]
        fn fidelity_invariants((od, fd) in field_strategy(), lambda in 0.0f64..4.0, t in 0.0f64..3.0, shift in -4.0f64..4.0) {
            let off = offsets_from(2, 2, 3, 3, od.clone());
            let flow = FlowField::new(Tensor::from_vec(&[2, 3, 3], fd.clone()).unwrap()).unwrap();
            let cfg = FidelityConfig::new(lambda, t).unwrap();
            let loss = offset_fidelity(&off, &flow, &cfg).unwrap();
            prop_assert!(loss >= 0.0);

            // Zero iff every component deviation is within the band.
            let within = (0..2 * 2).all(|gk| {
                (0..18).all(|q| (od[gk * 18 + q] - fd[q]).abs() <= t)
            });
            if lambda > 0.0 {
                prop_assert_eq!(loss == 0.0, within);
            }

            // Doubling lambda doubles the term exactly.
            let cfg2 = FidelityConfig::new(2.0 * lambda, t).unwrap();
            prop_assert_eq!(offset_fidelity(&off, &flow, &cfg2).unwrap(), 2.0 * loss);

            // Gradient gate.
            let grad = offset_fidelity_grad(&off, &flow, &cfg).unwrap();
            for gk in 0..4 {
                for q in 0..18 {
                    if (od[gk * 18 + q] - fd[q]).abs() <= t {
                        prop_assert_eq!(grad.data()[gk * 18 + q], 0.0);
                    }
                }
            }

            // Shifting offsets and flow together: deviations are recomputed
            // after rounding, so compare with a tolerance scaled to the sum.
            let shifted_off = offsets_from(2, 2, 3, 3, od.iter().map(|v| v + shift).collect());
            let shifted_flow = FlowField::new(Tensor::from_vec(&[2, 3, 3], fd.iter().map(|v| v + shift).collect()).unwrap()).unwrap();
            let cfg1 = FidelityConfig::new(1.0, t).unwrap();
            let a = offset_fidelity(&off, &flow, &cfg1).unwrap();
            let b = offset_fidelity(&shifted_off, &shifted_flow, &cfg1).unwrap();
            // A deviation within rounding of t may flip the gate.
            let near_gate = (0..4).any(|gk| (0..18).any(|q| ((od[gk * 18 + q] - fd[q]).abs() - t).abs() < 1e-9));
            if !near_gate {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
            }
        }
    }
}
