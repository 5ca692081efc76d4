//! 8-bit binary PGM masks and `DEPTHF32` depth rasters.

use std::path::Path;

use crate::camera::Mask;
use crate::error::{Error, Result};

pub const DEPTH_MAGIC: &[u8; 8] = b"DEPTHF32";

/// Encodes a mask as binary PGM (`P5`, maxval 255; covered pixels 255).
pub fn encode_pgm(mask: &Mask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend(mask.data.iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

/// Decodes a binary PGM; any nonzero sample counts as covered.
pub fn decode_pgm(bytes: &[u8]) -> Result<Mask> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err(Error::Format("not a binary PGM (expected P5)".into()));
    }
    let mut num = |what: &str| -> Result<usize> {
        let t = token()?;
        t.parse().map_err(|_| Error::Format(format!("bad PGM {what}: {t}")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported PGM maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let data_start = pos + 1;
    let n = width * height;
    if bytes.len() < data_start + n {
        return Err(Error::Format(format!("PGM raster truncated: need {n} bytes")));
    }
    Ok(Mask { height, width, data: bytes[data_start..data_start + n].iter().map(|&b| b != 0).collect() })
}

/// Encodes a depth raster: magic, `u32` H, `u32` W, then `f32` LE values.
pub fn encode_depth(height: usize, width: usize, depth: &[f64]) -> Result<Vec<u8>> {
    if depth.len() != height * width {
        return Err(Error::Format(format!("depth raster has {} values for {height}x{width}", depth.len())));
    }
    let mut out = Vec::with_capacity(16 + 4 * depth.len());
    out.extend_from_slice(DEPTH_MAGIC);
    out.extend_from_slice(&(height as u32).to_le_bytes());
    out.extend_from_slice(&(width as u32).to_le_bytes());
    for &d in depth {
        out.extend_from_slice(&(d as f32).to_le_bytes());
    }
    Ok(out)
}

/// Decodes a depth raster into `(H, W, values)`.
pub fn decode_depth(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    if bytes.len() < 16 || &bytes[..8] != DEPTH_MAGIC {
        return Err(Error::Format("missing DEPTHF32 header".into()));
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    if bytes.len() != 16 + 4 * h * w {
        return Err(Error::Format(format!("depth raster size mismatch for {h}x{w}")));
    }
    Ok((h, w, bytes[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect()))
}

pub fn write_pgm(path: &Path, mask: &Mask) -> Result<()> {
    std::fs::write(path, encode_pgm(mask)).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<Mask> {
    decode_pgm(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
