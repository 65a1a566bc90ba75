//! Binary (P5) PGM with maxval 255.
//!
//! Pixels decode to `v / 255` and encode as `round(x · 255)` clamped to
//! `[0, 255]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Decodes a P5 image into an `(H, W)` tensor with values in `[0, 1]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos)?;
    if magic != b"P5" {
        return Err(Error::format(format!(
            "bad PGM magic {:?} (only binary P5 is supported)",
            String::from_utf8_lossy(magic)
        )));
    }
    let width = parse_number(next_token(bytes, &mut pos)?, "width")?;
    let height = parse_number(next_token(bytes, &mut pos)?, "height")?;
    let maxval = parse_number(next_token(bytes, &mut pos)?, "maxval")?;
    if maxval != 255 {
        return Err(Error::format(format!("unsupported PGM maxval {maxval} (only 255)")));
    }
    if width == 0 || height == 0 {
        return Err(Error::format("PGM has zero extent"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::format("PGM header not terminated by whitespace")),
    }
    let len = width.checked_mul(height).ok_or_else(|| Error::format("PGM dimensions overflow"))?;
    let raster = bytes
        .get(pos..pos + len)
        .ok_or_else(|| Error::format(format!("PGM payload truncated: need {len} bytes, have {}", bytes.len() - pos)))?;
    let values = raster.iter().map(|&v| v as f32 / 255.0).collect();
    Tensor::from_values(&[height, width], values)
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while let Some(&b) = bytes.get(*pos) {
                    *pos += 1;
                    if b == b'\n' || b == b'\r' {
                        break;
                    }
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(Error::format("PGM header truncated")),
        }
    }
    let start = *pos;
    while let Some(&b) = bytes.get(*pos) {
        if b.is_ascii_whitespace() {
            break;
        }
        *pos += 1;
    }
    Ok(&bytes[start..*pos])
}

fn parse_number(token: &[u8], what: &str) -> Result<usize> {
    std::str::from_utf8(token)
        .ok()
        .filter(|s| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()))
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format(format!("bad PGM {what} {:?}", String::from_utf8_lossy(token))))
}

/// Encodes a tensor of shape `(H, W)` (leading unit axes allowed) as P5.
pub fn encode_pgm<T: Element>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let dims = t.dims();
    let rank = dims.len();
    if rank < 2 || dims[..rank - 2].iter().any(|&d| d != 1) {
        return Err(Error::shape(format!("PGM needs a single H×W plane, got {}", t.shape())));
    }
    let (h, w) = (dims[rank - 2], dims[rank - 1]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.reserve(h * w);
    for &v in t.data() {
        let scaled = (v.as_f64() * 255.0).round();
        let byte = if scaled.is_nan() { 0.0 } else { scaled.clamp(0.0, 255.0) };
        out.push(byte as u8);
    }
    Ok(out)
}

pub fn read_pgm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes).map_err(|e| e.context(path.display()))
}

pub fn write_pgm<T: Element>(path: &Path, t: &Tensor<T>) -> Result<()> {
    std::fs::write(path, encode_pgm(t)?).map_err(|e| Error::io(path, e))
}
