use std::path::Path;

use super::{format_err, read_bytes, write_bytes, Cursor};
use crate::error::Result;
use crate::tensor::{DType, Tensor};

pub const TNSR_MAGIC: &[u8; 4] = b"TNSR";
pub const TNSR_VERSION: u32 = 1;

fn dtype_code(d: DType) -> u8 {
    match d {
        DType::F32 => 1,
        DType::F64 => 2,
    }
}

/// `TNSR` ‖ u32 version ‖ u8 dtype ‖ u8 ndim ‖ ndim × u32 dims ‖ payload,
/// all little-endian. The tensor's dtype tag selects the payload width.
pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    if t.ndim() > u8::MAX as usize {
        return format_err(format!("{} dimensions do not fit the header", t.ndim()));
    }
    let mut out = Vec::with_capacity(10 + 4 * t.ndim() + t.len() * t.dtype().width());
    out.extend_from_slice(TNSR_MAGIC);
    out.extend_from_slice(&TNSR_VERSION.to_le_bytes());
    out.push(dtype_code(t.dtype()));
    out.push(t.ndim() as u8);
    for &d in t.dims() {
        let d = u32::try_from(d).or_else(|_| format_err(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match t.dtype() {
        DType::F32 => t
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => t
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut cur = Cursor::new(bytes, "TNSR file");
    if &cur.take::<4>()? != TNSR_MAGIC {
        return format_err("TNSR magic mismatch");
    }
    let version = u32::from_le_bytes(cur.take()?);
    if version != TNSR_VERSION {
        return format_err(format!("unsupported TNSR version {version}"));
    }
    let dtype = match cur.take::<1>()?[0] {
        1 => DType::F32,
        2 => DType::F64,
        code => return format_err(format!("unknown TNSR dtype code {code}")),
    };
    let ndim = cur.take::<1>()?[0] as usize;
    if ndim == 0 {
        return format_err("TNSR tensor has no dimensions");
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(u32::from_le_bytes(cur.take()?) as usize);
    }
    let count = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .filter(|&n| n > 0)
        .ok_or_else(|| crate::Error::Format(format!("invalid TNSR dims {dims:?}")))?;
    let expected = count.checked_mul(dtype.width());
    if expected != Some(cur.remaining()) {
        return format_err(format!(
            "TNSR payload is {} bytes, dims {dims:?} need {}",
            cur.remaining(),
            count.saturating_mul(dtype.width())
        ));
    }
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        data.push(match dtype {
            DType::F32 => f32::from_le_bytes(cur.take()?) as f64,
            DType::F64 => f64::from_le_bytes(cur.take()?),
        });
    }
    Ok(Tensor::from_vec(&dims, data)?.with_dtype(dtype))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_tensor(&read_bytes(path.as_ref())?)
}

pub fn write_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_tensor(t)?)
}
