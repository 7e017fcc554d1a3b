//! Offset diagnostics: diversity, distance to flow, ranking and correlation.
//!
//! Distances between an offset and the flow are L1 over the two components.

use crate::dcn::{MaskField, OffsetField};
use crate::error::{input_err, shape_err, Error, Result};
use crate::tensor::{FlowField, Tensor};

/// Per-pixel spread of the `G·N` offsets, in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct DiversityMap(Tensor);

impl DiversityMap {
    pub fn height(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn mean(&self) -> f64 {
        self.0.sum() / self.0.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.0.data().iter().copied().fold(0.0, f64::max)
    }
}

/// Population standard deviation of the offsets at each pixel, per
/// component, combined as `sqrt(var_dx + var_dy)`.
pub fn offset_diversity_map(offsets: &OffsetField) -> DiversityMap {
    let (g_count, n_count) = (offsets.groups(), offsets.per_group());
    let hw = offsets.height() * offsets.width();
    let m = (g_count * n_count) as f64;
    let mut out = vec![0.0; hw];
    for (p, slot) in out.iter_mut().enumerate() {
        let mut var = [0.0; 2];
        for (comp, v) in var.iter_mut().enumerate() {
            // Deviations are taken from the first sample, so coincident
            // offsets give exactly zero.
            let pivot = offsets.component(0, 0, comp)[p];
            let mut sum = 0.0;
            for g in 0..g_count {
                for k in 0..n_count {
                    sum += offsets.component(g, k, comp)[p] - pivot;
                }
            }
            let mean = sum / m;
            let mut ss = 0.0;
            for g in 0..g_count {
                for k in 0..n_count {
                    let d = offsets.component(g, k, comp)[p] - pivot - mean;
                    ss += d * d;
                }
            }
            *v = ss / m;
        }
        *slot = (var[0] + var[1]).sqrt();
    }
    DiversityMap(
        Tensor::from_vec(&[offsets.height(), offsets.width()], out)
            .expect("offset field has positive spatial size"),
    )
}

fn check_spatial(offsets: &OffsetField, flow: &FlowField) -> Result<()> {
    if offsets.height() != flow.height() || offsets.width() != flow.width() {
        return shape_err("offsets and flow differ in spatial size");
    }
    Ok(())
}

#[inline]
fn l1(dx: f64, dy: f64, u: f64, v: f64) -> f64 {
    (dx - u).abs() + (dy - v).abs()
}

/// For each threshold, the fraction of `(g, n, pixel)` estimates whose L1
/// distance to the flow is at most that threshold.
pub fn flow_distance_cdf(
    offsets: &OffsetField,
    flow: &FlowField,
    thresholds: &[f64],
) -> Result<Vec<f64>> {
    check_spatial(offsets, flow)?;
    if thresholds.is_empty() {
        return input_err("at least one threshold is required");
    }
    if thresholds.iter().any(|&t| !(t > 0.0)) || thresholds.windows(2).any(|w| w[1] < w[0]) {
        return input_err("thresholds must be positive and ascending");
    }
    let mut dists = Vec::with_capacity(offsets.groups() * offsets.per_group() * flow.dx().len());
    for g in 0..offsets.groups() {
        for k in 0..offsets.per_group() {
            for p in 0..flow.dx().len() {
                dists.push(l1(
                    offsets.dx(g, k)[p],
                    offsets.dy(g, k)[p],
                    flow.dx()[p],
                    flow.dy()[p],
                ));
            }
        }
    }
    let total = dists.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&t| dists.iter().filter(|&&d| d <= t).count() as f64 / total)
        .collect())
}

/// Mean over pixels of the L1 distance between offset `(g, k)` and the flow,
/// in `(g, k)` lexicographic order.
pub fn mean_flow_distances(offsets: &OffsetField, flow: &FlowField) -> Result<Vec<f64>> {
    check_spatial(offsets, flow)?;
    let hw = flow.dx().len();
    let mut out = Vec::with_capacity(offsets.groups() * offsets.per_group());
    for g in 0..offsets.groups() {
        for k in 0..offsets.per_group() {
            let mut sum = 0.0;
            for p in 0..hw {
                sum += l1(
                    offsets.dx(g, k)[p],
                    offsets.dy(g, k)[p],
                    flow.dx()[p],
                    flow.dy()[p],
                );
            }
            out.push(sum / hw as f64);
        }
    }
    Ok(out)
}

/// `(g, k)` indices ordered by ascending mean L1 distance to the flow;
/// ties keep lexicographic order.
pub fn sort_by_flow_distance(
    offsets: &OffsetField,
    flow: &FlowField,
) -> Result<Vec<(usize, usize)>> {
    let dists = mean_flow_distances(offsets, flow)?;
    let n = offsets.per_group();
    let mut order: Vec<usize> = (0..dists.len()).collect();
    order.sort_by(|&a, &b| dists[a].total_cmp(&dists[b]));
    Ok(order.into_iter().map(|i| (i / n, i % n)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScatterPoint {
    pub group: usize,
    pub index: usize,
    pub mean_l1_to_flow: f64,
    pub mean_mask: f64,
}

/// One `(mean distance to flow, mean mask)` pair per offset.
pub fn mask_flow_scatter(
    offsets: &OffsetField,
    masks: &MaskField,
    flow: &FlowField,
) -> Result<Vec<ScatterPoint>> {
    masks.check_against(offsets)?;
    let dists = mean_flow_distances(offsets, flow)?;
    let hw = flow.dx().len();
    let n = offsets.per_group();
    Ok(dists
        .into_iter()
        .enumerate()
        .map(|(i, d)| {
            let (g, k) = (i / n, i % n);
            let mut sum = 0.0;
            for &m in masks.plane(g, k) {
                sum += m;
            }
            ScatterPoint {
                group: g,
                index: k,
                mean_l1_to_flow: d,
                mean_mask: sum / hw as f64,
            }
        })
        .collect())
}

/// Sample Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return shape_err(format!("{} xs but {} ys", xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return input_err("correlation needs at least two points");
    }
    let constant = |v: &[f64]| v.iter().all(|&x| x == v[0]);
    if constant(xs) || constant(ys) {
        return Err(Error::Degenerate("zero variance".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// A named vector of values together with the routine that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Statistic {
    pub name: String,
    pub producer: &'static str,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StatsReport {
    pub metadata: Vec<(String, String)>,
    pub statistics: Vec<Statistic>,
}

impl StatsReport {
    pub fn push(&mut self, name: impl Into<String>, producer: &'static str, values: Vec<f64>) {
        self.statistics.push(Statistic {
            name: name.into(),
            producer,
            values,
        });
    }

    pub fn meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.push((key.into(), value.into()));
    }

    pub fn get(&self, name: &str) -> Option<&Statistic> {
        self.statistics.iter().find(|s| s.name == name)
    }
}

/// The full set of offset diagnostics for one offset field.
pub fn analyze(
    offsets: &OffsetField,
    flow: &FlowField,
    masks: Option<&MaskField>,
    thresholds: &[f64],
) -> Result<(StatsReport, DiversityMap)> {
    let mut report = StatsReport::default();
    report.meta("offsets_dims", format!("{:?}", offsets.tensor().dims()));
    report.meta("flow_dims", format!("{:?}", flow.tensor().dims()));
    report.meta(
        "thresholds",
        thresholds
            .iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(" "),
    );
    if let Some(m) = masks {
        report.meta("masks_dims", format!("{:?}", m.tensor().dims()));
    }

    let div = offset_diversity_map(offsets);
    report.push("diversity_mean", "offset_diversity_map", vec![div.mean()]);
    report.push("diversity_max", "offset_diversity_map", vec![div.max()]);
    report.push(
        "flow_distance_cdf",
        "flow_distance_cdf",
        flow_distance_cdf(offsets, flow, thresholds)?,
    );
    report.push(
        "mean_l1_to_flow",
        "sort_by_flow_distance",
        mean_flow_distances(offsets, flow)?,
    );
    let n = offsets.per_group();
    report.push(
        "flow_distance_rank",
        "sort_by_flow_distance",
        sort_by_flow_distance(offsets, flow)?
            .into_iter()
            .map(|(g, k)| (g * n + k) as f64)
            .collect(),
    );
    if let Some(m) = masks {
        let pts = mask_flow_scatter(offsets, m, flow)?;
        let xs: Vec<f64> = pts.iter().map(|p| p.mean_l1_to_flow).collect();
        let ys: Vec<f64> = pts.iter().map(|p| p.mean_mask).collect();
        report.push("mask_mean", "mask_flow_scatter", ys.clone());
        if let Ok(r) = pearson(&xs, &ys) {
            report.push("mask_flow_pearson", "pearson", vec![r]);
        }
    }
    Ok((report, div))
}
