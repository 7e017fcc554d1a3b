use std::path::Path;

use super::{format_err, write_bytes};
use crate::analysis::DiversityMap;
use crate::error::Result;

/// Binary greyscale (P5, maxval 255) after min-max normalisation with
/// round-half-to-even. A constant plane renders black.
pub fn encode_pgm(values: &[f64], height: usize, width: usize) -> Result<Vec<u8>> {
    if values.len() != height * width || values.is_empty() {
        return format_err(format!(
            "{} values do not form a {height}x{width} image",
            values.len()
        ));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return format_err("heatmap contains non-finite values");
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    let span = hi - lo;
    out.extend(values.iter().map(|&v| {
        if span > 0.0 {
            ((v - lo) / span * 255.0)
                .round_ties_even()
                .clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    Ok(out)
}

pub fn heatmap_pgm(map: &DiversityMap, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(
        path.as_ref(),
        &encode_pgm(map.data(), map.height(), map.width())?,
    )
}
