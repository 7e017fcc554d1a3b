//! Desk-scale experiments: synthetic aligned pairs, gradient-descent offset
//! fitting with and without the fidelity term, and offset-count sweeps.

use crate::analysis::{offset_diversity_map, pearson};
use crate::dcn::{decomposed_deform_conv, zero_taps, OffsetField, PointwiseKernel};
use crate::error::{input_err, shape_err, Error, Result};
use crate::gradients::dcn_backward;
use crate::losses::{
    charbonnier, charbonnier_grad, offset_fidelity, offset_fidelity_grad, FidelityConfig,
    DEFAULT_CHARBONNIER_EPS,
};
use crate::rng::SplitMix64;
use crate::sampling::bilinear_sample;
use crate::tensor::{FeatureMap, FlowField, Tensor};

/// Axis-aligned rectangle in pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn new(top: usize, left: usize, height: usize, width: usize) -> Self {
        Self {
            top,
            left,
            height,
            width,
        }
    }

    /// A `height × width` rectangle centred in a `frame_h × frame_w` frame.
    pub fn centered(frame_h: usize, frame_w: usize, height: usize, width: usize) -> Self {
        Self::new(
            frame_h.saturating_sub(height) / 2,
            frame_w.saturating_sub(width) / 2,
            height,
            width,
        )
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.top..self.top + self.height).contains(&y)
            && (self.left..self.left + self.width).contains(&x)
    }
}

/// Ground-truth motion between the two frames.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FlowKind {
    Constant {
        dx: f64,
        dy: f64,
    },
    /// `(dx, dy) + A · (x - cx, y - cy)` about the frame centre.
    Affine {
        dx: f64,
        dy: f64,
        matrix: [[f64; 2]; 2],
    },
    /// `left` for columns `< split`, `right` from `split` on.
    Piecewise {
        split: usize,
        left: (f64, f64),
        right: (f64, f64),
    },
}

impl FlowKind {
    pub fn field(&self, height: usize, width: usize) -> Result<FlowField> {
        let hw = height * width;
        let mut data = vec![0.0; 2 * hw];
        let cy = (height as f64 - 1.0) / 2.0;
        let cx = (width as f64 - 1.0) / 2.0;
        for y in 0..height {
            for x in 0..width {
                let (u, v) = match *self {
                    FlowKind::Constant { dx, dy } => (dx, dy),
                    FlowKind::Affine { dx, dy, matrix: m } => {
                        let (rx, ry) = (x as f64 - cx, y as f64 - cy);
                        (
                            dx + m[0][0] * rx + m[0][1] * ry,
                            dy + m[1][0] * rx + m[1][1] * ry,
                        )
                    }
                    FlowKind::Piecewise { split, left, right } => {
                        if x < split {
                            left
                        } else {
                            right
                        }
                    }
                };
                data[y * width + x] = u;
                data[hw + y * width + x] = v;
            }
        }
        FlowField::new(Tensor::from_vec(&[2, height, width], data)?)
    }
}

/// Low-pass random texture: uniform noise, repeated box blurs, then
/// rescaled per channel to zero mean and standard deviation `amplitude`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Texture {
    pub blur_radius: usize,
    pub passes: usize,
    pub amplitude: f64,
}

impl Default for Texture {
    fn default() -> Self {
        Self {
            blur_radius: 2,
            passes: 2,
            amplitude: 0.2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub flow: FlowKind,
    /// Region zeroed in the neighbour frame.
    pub occlusion: Option<Rect>,
    pub texture: Texture,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            channels: 4,
            flow: FlowKind::Constant { dx: 3.0, dy: 0.0 },
            occlusion: Some(Rect::centered(16, 16, 6, 6)),
            texture: Texture::default(),
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn without_occlusion(self) -> Self {
        Self {
            occlusion: None,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return input_err(format!(
                "scene must be non-empty, got {}x{}x{}",
                self.channels, self.height, self.width
            ));
        }
        if let Some(r) = self.occlusion {
            if r.top + r.height > self.height || r.left + r.width > self.width {
                return input_err(format!(
                    "occlusion {r:?} exceeds the {}x{} frame",
                    self.height, self.width
                ));
            }
        }
        let t = self.texture;
        if !(t.amplitude.is_finite() && t.amplitude > 0.0) {
            return input_err(format!(
                "texture amplitude must be positive, got {}",
                t.amplitude
            ));
        }
        Ok(())
    }
}

fn box_blur(plane: &mut [f64], h: usize, w: usize, radius: usize) {
    if radius == 0 {
        return;
    }
    let r = radius as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let norm = 1.0 / (2 * radius + 1) as f64;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..h {
        for x in 0..w {
            let acc: f64 = (-r..=r)
                .map(|d| plane[y * w + clamp(x as isize + d, w)])
                .sum();
            tmp[y * w + x] = acc * norm;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let acc: f64 = (-r..=r)
                .map(|d| tmp[clamp(y as isize + d, h) * w + x])
                .sum();
            plane[y * w + x] = acc * norm;
        }
    }
}

fn standardize(plane: &mut [f64], amplitude: f64) {
    let n = plane.len() as f64;
    let mean = plane.iter().sum::<f64>() / n;
    let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let scale = if var > 0.0 {
        amplitude / var.sqrt()
    } else {
        0.0
    };
    plane.iter_mut().for_each(|v| *v = (*v - mean) * scale);
}

/// Builds `(f_ref, f_nbr, flow)`. Both frames view one textured canvas:
/// `f_nbr` is an aligned crop and `f_ref(p)` samples the canvas at
/// `p + flow(p)`, so warping `f_nbr` by the flow reproduces `f_ref`
/// wherever the source stays inside the frame and outside the occlusion.
pub fn synth_pair(spec: &SceneSpec) -> Result<(FeatureMap, FeatureMap, FlowField)> {
    spec.validate()?;
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let flow = spec.flow.field(h, w)?;
    let reach = flow
        .dx()
        .iter()
        .chain(flow.dy())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let margin = reach.ceil() as usize + 2;
    let (ch, cw) = (h + 2 * margin, w + 2 * margin);
    let mut rng = SplitMix64::new(spec.seed);
    let mut f_ref = FeatureMap::zeros(c, h, w)?;
    let mut f_nbr = FeatureMap::zeros(c, h, w)?;
    let mut canvas = vec![0.0; ch * cw];
    let m = margin as f64;
    for ci in 0..c {
        rng.fill_uniform(&mut canvas, -1.0, 1.0);
        for _ in 0..spec.texture.passes {
            box_blur(&mut canvas, ch, cw, spec.texture.blur_radius);
        }
        standardize(&mut canvas, spec.texture.amplitude);
        let nbr = f_nbr.plane_mut(ci);
        for y in 0..h {
            nbr[y * w..(y + 1) * w].copy_from_slice(
                &canvas[(y + margin) * cw + margin..(y + margin) * cw + margin + w],
            );
        }
        let reference = f_ref.plane_mut(ci);
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let sy = y as f64 + m + flow.dy()[p];
                let sx = x as f64 + m + flow.dx()[p];
                reference[p] = bilinear_sample(&canvas, ch, cw, sy, sx)?;
            }
        }
    }
    if let Some(r) = spec.occlusion {
        for ci in 0..c {
            let plane = f_nbr.plane_mut(ci);
            for y in r.top..r.top + r.height {
                plane[y * w + r.left..y * w + r.left + r.width].fill(0.0);
            }
        }
    }
    Ok((f_ref, f_nbr, flow))
}

/// Ring radius used by sweeps to break the symmetry between offsets.
pub const DEFAULT_SPREAD: f64 = 1.0;

/// Starting point for the fitted offsets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Flow,
    /// Flow plus a constant vector of length `d` along the diagonal.
    Adversarial(f64),
    /// Flow for the first offset of each group; the others on a circle of
    /// this radius around it.
    Spread(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitOptions {
    pub per_group: usize,
    pub groups: usize,
    pub fidelity: FidelityConfig,
    pub steps: usize,
    pub lr: f64,
    pub init: Init,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            per_group: 1,
            groups: 1,
            fidelity: FidelityConfig::new(1.0, 2.0).expect("valid constants"),
            steps: 500,
            lr: 0.1,
            init: Init::Flow,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return input_err("steps must be at least 1");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return input_err(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.per_group == 0 || self.groups == 0 {
            return input_err("offset counts must be positive");
        }
        if let Init::Adversarial(d) | Init::Spread(d) = self.init {
            if !d.is_finite() {
                return input_err("init distance must be finite");
            }
        }
        Ok(())
    }
}

/// Per-step traces are recorded before each update; the `final_*` fields
/// describe the parameters after the last update.
#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub data_loss: Vec<f64>,
    pub fidelity_loss: Vec<f64>,
    pub max_deviation: Vec<f64>,
    pub mean_diversity: Vec<f64>,
    pub offsets: OffsetField,
    pub weights: PointwiseKernel,
    pub final_data_loss: f64,
    pub final_fidelity_loss: f64,
    pub final_max_deviation: f64,
    pub final_diversity: f64,
    pub converged: bool,
}

/// Largest per-component distance between any offset and the flow.
pub fn max_deviation(offsets: &OffsetField, flow: &FlowField) -> f64 {
    let mut worst = 0.0f64;
    for g in 0..offsets.groups() {
        for k in 0..offsets.per_group() {
            for (o, f) in offsets.dx(g, k).iter().zip(flow.dx()) {
                worst = worst.max((o - f).abs());
            }
            for (o, f) in offsets.dy(g, k).iter().zip(flow.dy()) {
                worst = worst.max((o - f).abs());
            }
        }
    }
    worst
}

fn initial_offsets(flow: &FlowField, groups: usize, n: usize, init: Init) -> Result<OffsetField> {
    let mut offsets = match init {
        Init::Zeros => return OffsetField::zeros(groups, n, flow.height(), flow.width()),
        _ => OffsetField::broadcast(flow, groups, n)?,
    };
    match init {
        Init::Adversarial(d) => {
            let shift = d / std::f64::consts::SQRT_2;
            offsets
                .tensor_mut()
                .data_mut()
                .iter_mut()
                .for_each(|v| *v += shift);
        }
        Init::Spread(radius) if n > 1 => {
            for g in 0..groups {
                for k in 1..n {
                    let angle = std::f64::consts::TAU * (k - 1) as f64 / (n - 1) as f64;
                    let (sy, sx) = angle.sin_cos();
                    let (ox, oy) = (radius * sx, radius * sy);
                    offsets
                        .component_mut(g, k, 0)
                        .iter_mut()
                        .for_each(|v| *v += ox);
                    offsets
                        .component_mut(g, k, 1)
                        .iter_mut()
                        .for_each(|v| *v += oy);
                }
            }
        }
        _ => {}
    }
    Ok(offsets)
}

/// Each output channel starts as the mean of its own warped copies.
fn averaging_kernel(channels: usize, groups: usize, n: usize) -> Result<PointwiseKernel> {
    let cg = channels / groups;
    let stacked = channels * n;
    let mut data = vec![0.0; channels * stacked];
    for g in 0..groups {
        for k in 0..n {
            for l in 0..cg {
                let s = (g * n + k) * cg + l;
                data[(g * cg + l) * stacked + s] = 1.0 / n as f64;
            }
        }
    }
    PointwiseKernel::from_vec(channels, stacked, data)
}

struct Evaluation {
    pred: FeatureMap,
    data: f64,
    fidelity: f64,
}

fn evaluate(
    f_ref: &FeatureMap,
    f_nbr: &FeatureMap,
    flow: &FlowField,
    offsets: &OffsetField,
    weights: &PointwiseKernel,
    opts: &FitOptions,
) -> Result<Evaluation> {
    let taps = zero_taps(opts.per_group);
    let pred = decomposed_deform_conv(f_nbr, offsets, &taps, weights, opts.groups)?;
    let data = charbonnier(pred.tensor(), f_ref.tensor(), DEFAULT_CHARBONNIER_EPS)?;
    let fidelity = offset_fidelity(offsets, flow, &opts.fidelity)?;
    Ok(Evaluation {
        pred,
        data,
        fidelity,
    })
}

fn diverged(step: usize, reason: impl Into<String>) -> Error {
    Error::Divergence {
        step,
        reason: reason.into(),
    }
}

/// Plain full-batch gradient descent on the Charbonnier alignment loss plus
/// the offset-fidelity term, over the offsets and the 1×1 mixing weights.
/// The weights use a step of `lr / (H·W)` since their gradient sums over
/// every pixel.
pub fn fit_offsets(
    f_ref: &FeatureMap,
    f_nbr: &FeatureMap,
    flow: &FlowField,
    opts: &FitOptions,
) -> Result<FitReport> {
    opts.validate()?;
    if !f_ref.same_shape(f_nbr) {
        return shape_err("reference and neighbour features differ in shape");
    }
    if flow.height() != f_ref.height() || flow.width() != f_ref.width() {
        return shape_err("flow and features differ in size");
    }
    if !f_ref.channels().is_multiple_of(opts.groups) {
        return input_err(format!(
            "{} groups do not divide {} channels",
            opts.groups,
            f_ref.channels()
        ));
    }
    let (g, n) = (opts.groups, opts.per_group);
    let taps = zero_taps(n);
    let mut offsets = initial_offsets(flow, g, n, opts.init)?;
    let mut weights = averaging_kernel(f_ref.channels(), g, n)?;
    let weight_lr = opts.lr / (f_ref.height() * f_ref.width()) as f64;

    let cap = opts.steps;
    let (mut data_tr, mut fid_tr, mut dev_tr, mut div_tr) = (
        Vec::with_capacity(cap),
        Vec::with_capacity(cap),
        Vec::with_capacity(cap),
        Vec::with_capacity(cap),
    );

    for step in 0..opts.steps {
        let ev = evaluate(f_ref, f_nbr, flow, &offsets, &weights, opts)?;
        if !(ev.data + ev.fidelity).is_finite() {
            return Err(diverged(step, "loss is not finite"));
        }
        data_tr.push(ev.data);
        fid_tr.push(ev.fidelity);
        dev_tr.push(max_deviation(&offsets, flow));
        div_tr.push(offset_diversity_map(&offsets).mean());

        let grad_pred = FeatureMap::new(charbonnier_grad(
            ev.pred.tensor(),
            f_ref.tensor(),
            DEFAULT_CHARBONNIER_EPS,
        )?)?;
        let grads = dcn_backward(&grad_pred, f_nbr, &offsets, None, &taps, &weights, g)?;
        let fid_grad = offset_fidelity_grad(&offsets, flow, &opts.fidelity)?;

        let od = offsets.tensor_mut().data_mut();
        for ((o, gd), gf) in od
            .iter_mut()
            .zip(grads.grad_offsets.data())
            .zip(fid_grad.data())
        {
            *o -= opts.lr * (gd + gf);
        }
        if !od.iter().all(|v| v.is_finite()) {
            return Err(diverged(step + 1, "offsets became non-finite"));
        }
        let wd = weights.tensor_mut().data_mut();
        for (w, gw) in wd.iter_mut().zip(grads.grad_kernel.data()) {
            *w -= weight_lr * gw;
        }
        if !wd.iter().all(|v| v.is_finite()) {
            return Err(diverged(step + 1, "mixing weights became non-finite"));
        }
    }

    let last = evaluate(f_ref, f_nbr, flow, &offsets, &weights, opts)?;
    if !(last.data + last.fidelity).is_finite() {
        return Err(diverged(opts.steps, "loss is not finite"));
    }
    let window_start = opts.steps - (opts.steps / 10).max(1);
    let before = data_tr[window_start] + fid_tr[window_start];
    let after = last.data + last.fidelity;
    let converged = (before - after).abs() <= 1e-3 * before.abs().max(1e-12);

    Ok(FitReport {
        data_loss: data_tr,
        fidelity_loss: fid_tr,
        max_deviation: dev_tr,
        mean_diversity: div_tr,
        final_max_deviation: max_deviation(&offsets, flow),
        final_diversity: offset_diversity_map(&offsets).mean(),
        offsets,
        weights,
        final_data_loss: last.data,
        final_fidelity_loss: last.fidelity,
        converged,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub per_group: usize,
    pub mean_data_loss: f64,
    pub mean_diversity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Correlation of row diversity with negated loss; absent when fewer
    /// than two rows or either column is constant.
    pub pearson: Option<f64>,
}

/// Fits every `(N, seed)` cell on the scene re-seeded with `seed` and
/// averages the final data loss and diversity per `N`.
pub fn diversity_sweep(
    spec: &SceneSpec,
    ns: &[usize],
    opts: &FitOptions,
    seeds: &[u64],
) -> Result<SweepTable> {
    if ns.is_empty() {
        return input_err("sweep needs at least one offset count");
    }
    if seeds.is_empty() {
        return input_err("sweep needs at least one seed");
    }
    let scenes = seeds
        .iter()
        .map(|&s| synth_pair(&spec.with_seed(s)))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(ns.len());
    for &n in ns {
        let cell = FitOptions {
            per_group: n,
            ..*opts
        };
        let (mut loss, mut div) = (0.0, 0.0);
        for (f_ref, f_nbr, flow) in &scenes {
            let r = fit_offsets(f_ref, f_nbr, flow, &cell)?;
            loss += r.final_data_loss;
            div += r.final_diversity;
        }
        let count = scenes.len() as f64;
        rows.push(SweepRow {
            per_group: n,
            mean_data_loss: loss / count,
            mean_diversity: div / count,
        });
    }
    let pearson = if rows.len() >= 2 {
        let d: Vec<f64> = rows.iter().map(|r| r.mean_diversity).collect();
        let l: Vec<f64> = rows.iter().map(|r| -r.mean_data_loss).collect();
        pearson(&d, &l).ok()
    } else {
        None
    };
    Ok(SweepTable { rows, pearson })
}
