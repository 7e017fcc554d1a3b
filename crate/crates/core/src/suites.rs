//! Randomized self-checks shared by the command-line tool and the
//! acceptance tests: decomposition equivalence and finite-difference
//! gradient agreement.

use crate::dcn::{
    conv2d, decomposed_deform_conv, deform_conv, kernel_taps, kernel_to_pointwise,
    modulated_decomposed_deform_conv, ConvKernel, MaskField, OffsetField, PointwiseKernel,
};
use crate::error::{input_err, Result};
use crate::gradients::{conv_backward, dcn_backward, finite_diff_check, warp_backward};
use crate::losses::{offset_fidelity, offset_fidelity_grad, FidelityConfig};
use crate::rng::SplitMix64;
use crate::sampling::{warp, BaseOffset};
use crate::tensor::{FeatureMap, FlowField, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct EquivConfig {
    /// Random instances per configuration.
    pub cases: usize,
    pub channels: Vec<usize>,
    pub groups: Vec<usize>,
    pub kernels: Vec<usize>,
    pub sizes: Vec<usize>,
    /// Offsets are drawn uniformly from `[-offset_range, offset_range]`.
    pub offset_range: f64,
    pub seed: u64,
}

impl Default for EquivConfig {
    fn default() -> Self {
        Self {
            cases: 100,
            channels: vec![2, 4, 8],
            groups: vec![1, 2, 4],
            kernels: vec![1, 3],
            sizes: vec![6, 12],
            offset_range: 3.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EquivRow {
    pub channels: usize,
    pub groups: usize,
    pub kernel: usize,
    pub size: usize,
    pub cases: usize,
    pub max_abs_diff: f64,
}

fn random_vec(rng: &mut SplitMix64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut v = vec![0.0; n];
    rng.fill_uniform(&mut v, lo, hi);
    v
}

/// Compares the fused deformable convolution with the warp-then-1×1 path
/// on random inputs for every valid configuration. Configurations whose
/// group count does not divide the channel count are skipped.
pub fn equivalence_suite(cfg: &EquivConfig) -> Result<Vec<EquivRow>> {
    if cfg.cases == 0 {
        return input_err("equivalence suite needs at least one case");
    }
    if !(cfg.offset_range.is_finite() && cfg.offset_range >= 0.0) {
        return input_err(format!("invalid offset range {}", cfg.offset_range));
    }
    let mut rng = SplitMix64::new(cfg.seed);
    let mut rows = Vec::new();
    for &c in &cfg.channels {
        for &g in &cfg.groups {
            if g == 0 || c % g != 0 {
                continue;
            }
            for &n in &cfg.kernels {
                let taps = kernel_taps(n);
                for &s in &cfg.sizes {
                    let mut worst = 0.0f64;
                    for _ in 0..cfg.cases {
                        let x = FeatureMap::from_vec(
                            c,
                            s,
                            s,
                            random_vec(&mut rng, c * s * s, -1.0, 1.0),
                        )?;
                        let k = ConvKernel::from_vec(
                            c,
                            c,
                            n,
                            random_vec(&mut rng, c * c * n * n, -1.0, 1.0),
                        )?;
                        let r = cfg.offset_range;
                        let count = g * n * n * 2 * s * s;
                        let off = OffsetField::new(Tensor::from_vec(
                            &[g, n * n, 2, s, s],
                            random_vec(&mut rng, count, -r, r),
                        )?)?;
                        let fused = deform_conv(&x, &off, &k, g)?;
                        let pw = kernel_to_pointwise(&k, g)?;
                        let split = decomposed_deform_conv(&x, &off, &taps, &pw, g)?;
                        worst = worst.max(fused.tensor().max_abs_diff(split.tensor())?);
                    }
                    rows.push(EquivRow {
                        channels: c,
                        groups: g,
                        kernel: n,
                        size: s,
                        cases: cfg.cases,
                        max_abs_diff: worst,
                    });
                }
            }
        }
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradConfig {
    pub cases: usize,
    pub h: f64,
    pub tol: f64,
    pub seed: u64,
}

impl Default for GradConfig {
    fn default() -> Self {
        Self {
            cases: 20,
            h: 1e-5,
            tol: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradRow {
    pub case: usize,
    pub operator: &'static str,
    pub argument: &'static str,
    pub parameters: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Integer part in `[lo, hi)` plus a fraction at least 0.05 from integers,
/// keeping every bilinear sample away from its derivative jumps.
fn safe_displacements(rng: &mut SplitMix64, n: usize, lo: i32, hi: i32) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let whole = lo + rng.below((hi - lo) as usize) as i32;
            whole as f64 + rng.uniform(0.05, 0.95)
        })
        .collect()
}

/// Deviation magnitudes at least 0.05 from both 0 and `t`, random sign.
fn safe_deviations(rng: &mut SplitMix64, n: usize, t: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = if rng.below(2) == 0 && t > 0.1 {
                rng.uniform(0.05, t - 0.05)
            } else {
                rng.uniform(t + 0.05, t + 3.0)
            };
            if rng.below(2) == 0 {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

fn random_tap(rng: &mut SplitMix64) -> BaseOffset {
    BaseOffset::new(rng.below(3) as i32 - 1, rng.below(3) as i32 - 1)
}

struct Recorder<'a> {
    rows: &'a mut Vec<GradRow>,
    case: usize,
    cfg: &'a GradConfig,
}

impl Recorder<'_> {
    /// The scalar objective is `<forward(p) - forward(params), weight>`.
    /// Subtracting the baseline output leaves the gradient unchanged but
    /// cancels every unperturbed entry exactly, so rounding noise scales
    /// with the touched outputs only.
    fn check<F>(
        &mut self,
        operator: &'static str,
        argument: &'static str,
        mut forward: F,
        weight: &Tensor,
        params: &[f64],
        analytic: &[f64],
    ) -> Result<()>
    where
        F: FnMut(&[f64]) -> Result<Tensor>,
    {
        let base = forward(params)?;
        let objective = |p: &[f64]| -> Result<f64> {
            let y = forward(p)?;
            let mut acc = 0.0;
            for ((a, b), w) in y.data().iter().zip(base.data()).zip(weight.data()) {
                acc += (a - b) * w;
            }
            Ok(acc)
        };
        let rep = finite_diff_check(objective, params, analytic, self.cfg.h, self.cfg.tol)?;
        self.rows.push(GradRow {
            case: self.case,
            operator,
            argument,
            parameters: params.len(),
            max_rel_err: rep.max_rel_err,
            pass: rep.pass,
        });
        Ok(())
    }
}

/// Central-difference checks of every backward pass on `cases` random
/// instances. Each scalar objective is `<forward(params), v>` for a random
/// upstream `v`.
pub fn gradient_suite(cfg: &GradConfig) -> Result<Vec<GradRow>> {
    if cfg.cases == 0 {
        return input_err("gradient suite needs at least one case");
    }
    let mut rng = SplitMix64::new(cfg.seed);
    let mut rows = Vec::new();
    for case in 0..cfg.cases {
        let mut rec = Recorder {
            rows: &mut rows,
            case,
            cfg,
        };
        let groups = 1 + rng.below(2);
        let c = groups * (1 + rng.below(2));
        let h = 4 + rng.below(3);
        let w = 4 + rng.below(3);
        let hw = h * w;

        // Warp.
        let base = random_tap(&mut rng);
        let fd = random_vec(&mut rng, c * hw, -1.0, 1.0);
        let dd = safe_displacements(&mut rng, 2 * hw, -2, 2);
        let v = Tensor::from_vec(&[c, h, w], random_vec(&mut rng, c * hw, -1.0, 1.0))?;
        let f = FeatureMap::from_vec(c, h, w, fd.clone())?;
        let d = FlowField::new(Tensor::from_vec(&[2, h, w], dd.clone())?)?;
        let (gf, gd) = warp_backward(&FeatureMap::new(v.clone())?, &f, &d, base)?;
        rec.check(
            "warp",
            "feature",
            |p| Ok(warp(&FeatureMap::from_vec(c, h, w, p.to_vec())?, &d, base)?.into_tensor()),
            &v,
            &fd,
            gf.data(),
        )?;
        rec.check(
            "warp",
            "displacement",
            |p| {
                Ok(warp(
                    &f,
                    &FlowField::new(Tensor::from_vec(&[2, h, w], p.to_vec())?)?,
                    base,
                )?
                .into_tensor())
            },
            &v,
            &dd,
            gd.tensor().data(),
        )?;

        // Convolution.
        let n = [1, 3][rng.below(2)];
        let co = 1 + rng.below(3);
        let kd = random_vec(&mut rng, co * c * n * n, -1.0, 1.0);
        let k = ConvKernel::from_vec(co, c, n, kd.clone())?;
        let vo = Tensor::from_vec(&[co, h, w], random_vec(&mut rng, co * hw, -1.0, 1.0))?;
        let (gx, gk) = conv_backward(&FeatureMap::new(vo.clone())?, &f, &k)?;
        rec.check(
            "conv",
            "input",
            |p| Ok(conv2d(&FeatureMap::from_vec(c, h, w, p.to_vec())?, &k)?.into_tensor()),
            &vo,
            &fd,
            gx.data(),
        )?;
        rec.check(
            "conv",
            "kernel",
            |p| Ok(conv2d(&f, &ConvKernel::from_vec(co, c, n, p.to_vec())?)?.into_tensor()),
            &vo,
            &kd,
            gk.data(),
        )?;

        // Decomposed deformable convolution, with masks on odd cases.
        let per = 1 + rng.below(3);
        let taps: Vec<BaseOffset> = (0..per).map(|_| random_tap(&mut rng)).collect();
        let od = safe_displacements(&mut rng, groups * per * 2 * hw, -2, 2);
        let off_dims = [groups, per, 2, h, w];
        let off = OffsetField::new(Tensor::from_vec(&off_dims, od.clone())?)?;
        let stacked = c * per;
        let pd = random_vec(&mut rng, co * stacked, -1.0, 1.0);
        let pw = PointwiseKernel::from_vec(co, stacked, pd.clone())?;
        let mask_dims = [groups, per, h, w];
        let md = random_vec(&mut rng, groups * per * hw, 0.1, 0.9);
        let masks = (case % 2 == 1)
            .then(|| MaskField::new(Tensor::from_vec(&mask_dims, md.clone())?))
            .transpose()?;
        let b = dcn_backward(
            &FeatureMap::new(vo.clone())?,
            &f,
            &off,
            masks.as_ref(),
            &taps,
            &pw,
            groups,
        )?;
        let fwd = |x: &FeatureMap, o: &OffsetField, m: Option<&MaskField>, p: &PointwiseKernel| {
            let out = match m {
                Some(m) => modulated_decomposed_deform_conv(x, o, m, &taps, p, groups)?,
                None => decomposed_deform_conv(x, o, &taps, p, groups)?,
            };
            Ok(out.into_tensor())
        };
        let m = masks.as_ref();
        rec.check(
            "dcn",
            "input",
            |p| fwd(&FeatureMap::from_vec(c, h, w, p.to_vec())?, &off, m, &pw),
            &vo,
            &fd,
            b.grad_input.data(),
        )?;
        rec.check(
            "dcn",
            "offsets",
            |p| {
                fwd(
                    &f,
                    &OffsetField::new(Tensor::from_vec(&off_dims, p.to_vec())?)?,
                    m,
                    &pw,
                )
            },
            &vo,
            &od,
            b.grad_offsets.data(),
        )?;
        rec.check(
            "dcn",
            "weights",
            |p| {
                fwd(
                    &f,
                    &off,
                    m,
                    &PointwiseKernel::from_vec(co, stacked, p.to_vec())?,
                )
            },
            &vo,
            &pd,
            b.grad_kernel.data(),
        )?;
        if let Some(gm) = &b.grad_masks {
            rec.check(
                "dcn",
                "masks",
                |p| {
                    fwd(
                        &f,
                        &off,
                        Some(&MaskField::new(Tensor::from_vec(&mask_dims, p.to_vec())?)?),
                        &pw,
                    )
                },
                &vo,
                &md,
                gm.data(),
            )?;
        }

        // Offset fidelity.
        let t = rng.uniform(0.5, 3.0);
        let fid = FidelityConfig::new(rng.uniform(0.1, 2.0), t)?;
        let flow_d = random_vec(&mut rng, 2 * hw, -3.0, 3.0);
        let flow = FlowField::new(Tensor::from_vec(&[2, h, w], flow_d)?)?;
        let dev = safe_deviations(&mut rng, groups * per * 2 * hw, t);
        let base_off = OffsetField::broadcast(&flow, groups, per)?;
        let fo: Vec<f64> = base_off
            .data()
            .iter()
            .zip(&dev)
            .map(|(a, b)| a + b)
            .collect();
        let fo_field = OffsetField::new(Tensor::from_vec(&off_dims, fo.clone())?)?;
        let gfid = offset_fidelity_grad(&fo_field, &flow, &fid)?;
        let unit = Tensor::new(&[1], 1.0)?;
        rec.check(
            "fidelity",
            "offsets",
            |p| {
                let off = OffsetField::new(Tensor::from_vec(&off_dims, p.to_vec())?)?;
                Tensor::from_vec(&[1], vec![offset_fidelity(&off, &flow, &fid)?])
            },
            &unit,
            &fo,
            gfid.data(),
        )?;
    }
    Ok(rows)
}
