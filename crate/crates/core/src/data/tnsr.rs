//! TNSR tensor file format.
//!
//! Layout: magic "TNSR", version byte 0x01, dtype byte (0x01 = 32-bit
//! float), ndim byte, ndim little-endian u32 dims, then the row-major
//! little-endian payload. Format errors name the byte offset of the first
//! inconsistency.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const VERSION: u8 = 0x01;
pub const DTYPE_F32: u8 = 0x01;
const MAX_NDIM: u8 = 8;

fn format_err(offset: u64, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

pub fn encode(t: &Tensor<f32>) -> Vec<u8> {
    let ndim = t.shape().len() as u8;
    let mut out = Vec::with_capacity(7 + 4 * ndim as usize + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(DTYPE_F32);
    out.push(ndim);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        let offset = bytes.iter().zip(MAGIC).position(|(a, b)| a != b).unwrap_or(bytes.len());
        return Err(format_err(offset as u64, "bad magic, expected \"TNSR\""));
    }
    if bytes.len() < 5 || bytes[4] != VERSION {
        return Err(format_err(4, format!("unsupported version, expected {VERSION:#04x}")));
    }
    if bytes.len() < 6 || bytes[5] != DTYPE_F32 {
        return Err(format_err(5, format!("unsupported dtype, expected {DTYPE_F32:#04x} (f32)")));
    }
    if bytes.len() < 7 {
        return Err(format_err(6, "truncated before ndim byte"));
    }
    let ndim = bytes[6];
    if ndim == 0 || ndim > MAX_NDIM {
        return Err(format_err(6, format!("ndim {ndim} outside 1..={MAX_NDIM}")));
    }
    let dims_end = 7 + 4 * ndim as usize;
    if bytes.len() < dims_end {
        return Err(format_err(bytes.len() as u64, "truncated inside dims"));
    }
    let mut shape = Vec::with_capacity(ndim as usize);
    for i in 0..ndim as usize {
        let off = 7 + 4 * i;
        let d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        if d == 0 {
            return Err(format_err(off as u64, "zero-sized dimension"));
        }
        shape.push(d as usize);
    }
    let numel: usize = shape.iter().product();
    let want = dims_end + 4 * numel;
    if bytes.len() < want {
        return Err(format_err(
            bytes.len() as u64,
            format!("truncated payload: want {want} bytes, have {}", bytes.len()),
        ));
    }
    if bytes.len() > want {
        return Err(format_err(want as u64, "trailing bytes after payload"));
    }
    let mut data = Vec::with_capacity(numel);
    for i in 0..numel {
        let off = dims_end + 4 * i;
        data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
    }
    Tensor::new(shape, data)
}

pub fn write_file(t: &Tensor<f32>, path: &Path) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| {
        Error::Validation(format!("cannot read tensor file {}: {e}", path.display()))
    })?;
    decode(&bytes).map_err(|e| match e {
        Error::Format { offset, message } => Error::Format {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_tensor() -> Tensor<f32> {
        Tensor::new(vec![2, 3], vec![0.0, 1.5, -2.25, 3.125, f32::MIN_POSITIVE, 1e30]).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let t = sample_tensor();
        let back = decode(&encode(&t)).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn corrupted_magic_is_rejected_with_offset() {
        let mut bytes = encode(&sample_tensor());
        bytes[1] ^= 0xff;
        match decode(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 1),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_is_rejected() {
        let bytes = encode(&sample_tensor());
        for cut in [3, 5, 6, 8, bytes.len() - 1] {
            assert!(
                matches!(decode(&bytes[..cut]), Err(Error::Format { .. })),
                "cut at {cut} must fail"
            );
        }
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = encode(&sample_tensor());
        bytes.push(0);
        assert!(matches!(decode(&bytes), Err(Error::Format { .. })));
    }
}
