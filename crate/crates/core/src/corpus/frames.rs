//! Frame files: little-endian `u32` header `(version, frame count, dim)`
//! followed by `count·dim` little-endian `f32` values.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const FRAME_FORMAT_VERSION: u32 = 1;

pub fn encode_frames(frames: &Tensor<f32>) -> Vec<u8> {
    let (n, d) = (frames.rows(), frames.cols());
    let mut buf = Vec::with_capacity(12 + 4 * frames.len());
    for v in [FRAME_FORMAT_VERSION, n as u32, d as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in frames.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_frames(bytes: &[u8], origin: &Path) -> Result<Tensor<f32>> {
    let bad = |msg: &str| Error::Format(format!("{}: {msg}", origin.display()));
    if bytes.len() < 12 {
        return Err(bad("truncated frame header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    if word(0) != FRAME_FORMAT_VERSION {
        return Err(bad(&format!("unknown frame format version {}", word(0))));
    }
    let (n, d) = (word(1) as usize, word(2) as usize);
    if n == 0 || d == 0 {
        return Err(bad("empty frame file"));
    }
    if bytes.len() != 12 + 4 * n * d {
        return Err(bad("frame payload length does not match header"));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect::<Vec<_>>();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite frame value"));
    }
    Ok(Tensor::from_rows(n, d, data))
}

pub fn write_frames(path: &Path, frames: &Tensor<f32>) -> Result<()> {
    std::fs::write(path, encode_frames(frames)).map_err(|e| Error::io(path, e))
}

pub fn read_frames(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_frames(&bytes, path)
}
