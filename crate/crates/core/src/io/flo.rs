use std::path::Path;

use super::{format_err, read_bytes, write_bytes, Cursor};
use crate::error::Result;
use crate::tensor::{FlowField, Tensor};

/// `202021.25` as a little-endian `f32`; the bytes spell `PIEH`.
pub const FLO_MAGIC: f32 = 202021.25;

/// Parses a Middlebury flow file: magic, `i32` width, `i32` height, then
/// row-major interleaved `(u, v)` `f32` pairs. `u` becomes dx, `v` dy.
pub fn decode_flo(bytes: &[u8]) -> Result<FlowField> {
    let mut cur = Cursor::new(bytes, ".flo file");
    let magic = f32::from_le_bytes(cur.take()?);
    if magic != FLO_MAGIC {
        return format_err(format!(".flo magic mismatch: read {magic}"));
    }
    let width = i32::from_le_bytes(cur.take()?);
    let height = i32::from_le_bytes(cur.take()?);
    if width <= 0 || height <= 0 {
        return format_err(format!(".flo has invalid size {width}x{height}"));
    }
    let (w, h) = (width as usize, height as usize);
    let expected = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| crate::Error::Format(".flo size overflows".into()))?;
    if cur.remaining() != expected {
        return format_err(format!(
            ".flo payload is {} bytes, {w}x{h} needs {expected}",
            cur.remaining()
        ));
    }
    let mut data = vec![0.0; 2 * h * w];
    let (dx, dy) = data.split_at_mut(h * w);
    for p in 0..h * w {
        dx[p] = f32::from_le_bytes(cur.take()?) as f64;
        dy[p] = f32::from_le_bytes(cur.take()?) as f64;
    }
    FlowField::new(Tensor::from_vec(&[2, h, w], data)?)
        .or_else(|e| format_err(format!(".flo payload rejected: {e}")))
}

/// Inverse of [`decode_flo`]; values are stored as `f32`.
pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let (h, w) = (flow.height(), flow.width());
    let mut out = Vec::with_capacity(12 + 8 * h * w);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    for (&u, &v) in flow.dx().iter().zip(flow.dy()) {
        out.extend_from_slice(&(u as f32).to_le_bytes());
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    decode_flo(&read_bytes(path.as_ref())?)
}

pub fn write_flo(flow: &FlowField, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_flo(flow))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn known_bytes() -> Vec<u8> {
        let mut b = b"PIEH".to_vec();
        b.extend_from_slice(&[1, 0, 0, 0, 1, 0, 0, 0]);
        b.extend_from_slice(&1.5f32.to_le_bytes());
        b.extend_from_slice(&(-2.0f32).to_le_bytes());
        b
    }

    #[test]
    fn magic_spells_pieh() {
        assert_eq!(&FLO_MAGIC.to_le_bytes(), b"PIEH");
    }

    #[test]
    fn decodes_hand_encoded_pixel() {
        let flow = decode_flo(&known_bytes()).unwrap();
        assert_eq!(flow.dx(), &[1.5]);
        assert_eq!(flow.dy(), &[-2.0]);
        assert_eq!(encode_flo(&flow), known_bytes());
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(decode_flo(&[0u8; 20]), Err(Error::Format(_))));
        let b = known_bytes();
        assert!(matches!(
            decode_flo(&b[..b.len() - 1]),
            Err(Error::Format(_))
        ));
        assert!(matches!(decode_flo(&b[..6]), Err(Error::Format(_))));
        let mut extra = b.clone();
        extra.push(0);
        assert!(matches!(decode_flo(&extra), Err(Error::Format(_))));
    }

    #[test]
    fn zero_flow_round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.flo");
        let flow = FlowField::zeros(2, 2).unwrap();
        write_flo(&flow, &path).unwrap();
        assert_eq!(read_flo(&path).unwrap(), flow);
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            read_flo("/nonexistent/x.flo"),
            Err(Error::Io { .. })
        ));
    }
}
