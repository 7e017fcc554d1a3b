//! Value parsers for the compound `fit` flags.

use dcnalign::harness::{FlowKind, Init, Rect};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Occlusion {
    None,
    Centered { height: usize, width: usize },
    At(Rect),
}

impl Occlusion {
    pub fn resolve(self, frame_h: usize, frame_w: usize) -> Option<Rect> {
        match self {
            Occlusion::None => None,
            Occlusion::Centered { height, width } => {
                Some(Rect::centered(frame_h, frame_w, height, width))
            }
            Occlusion::At(r) => Some(r),
        }
    }
}

fn numbers<T: std::str::FromStr>(s: &str, count: usize, what: &str) -> Result<Vec<T>, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != count {
        return Err(format!(
            "{what} needs {count} comma-separated values, got `{s}`"
        ));
    }
    parts
        .iter()
        .map(|p| {
            p.parse()
                .map_err(|_| format!("`{p}` is not a valid number in {what}"))
        })
        .collect()
}

pub fn flow_kind(s: &str) -> Result<FlowKind, String> {
    if let Some(rest) = s.strip_prefix("affine:") {
        let v: Vec<f64> = numbers(rest, 6, "affine flow")?;
        Ok(FlowKind::Affine {
            dx: v[0],
            dy: v[1],
            matrix: [[v[2], v[3]], [v[4], v[5]]],
        })
    } else if let Some(rest) = s.strip_prefix("piecewise:") {
        let split: usize = rest
            .split(',')
            .next()
            .and_then(|p| p.trim().parse().ok())
            .ok_or_else(|| format!("piecewise flow needs a column split, got `{rest}`"))?;
        let v: Vec<f64> = numbers(
            rest.split_once(',').map_or("", |x| x.1),
            4,
            "piecewise flow",
        )?;
        Ok(FlowKind::Piecewise {
            split,
            left: (v[0], v[1]),
            right: (v[2], v[3]),
        })
    } else {
        let v: Vec<f64> = numbers(s.strip_prefix("constant:").unwrap_or(s), 2, "flow")?;
        Ok(FlowKind::Constant { dx: v[0], dy: v[1] })
    }
}

pub fn occlusion(s: &str) -> Result<Occlusion, String> {
    if s.eq_ignore_ascii_case("none") {
        return Ok(Occlusion::None);
    }
    if let Some((h, w)) = s.split_once(['x', 'X']) {
        let parse = |p: &str| {
            p.trim()
                .parse()
                .map_err(|_| format!("bad occlusion size `{s}`"))
        };
        return Ok(Occlusion::Centered {
            height: parse(h)?,
            width: parse(w)?,
        });
    }
    let v: Vec<usize> = numbers(s, 4, "occlusion")?;
    Ok(Occlusion::At(Rect::new(v[0], v[1], v[2], v[3])))
}

pub fn init(s: &str) -> Result<Init, String> {
    let (name, arg) = s.split_once(':').unwrap_or((s, ""));
    let value = || -> Result<f64, String> {
        arg.trim()
            .parse()
            .map_err(|_| format!("init `{name}` needs a numeric argument, got `{s}`"))
    };
    match name {
        "zeros" => Ok(Init::Zeros),
        "flow" => Ok(Init::Flow),
        "adversarial" => Ok(Init::Adversarial(value()?)),
        "spread" => Ok(Init::Spread(value()?)),
        _ => Err(format!(
            "unknown init `{s}`; expected zeros, flow, adversarial:D or spread:R"
        )),
    }
}
