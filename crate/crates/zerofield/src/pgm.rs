//! Minimal binary PGM (P5) reader/writer: 16-bit big-endian frames and
//! 8-bit masks. Strict on read; byte-stable on write.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes a 16-bit P5 (maxval 65535, big-endian samples).
pub fn write_pgm16(path: &Path, nx: usize, ny: usize, data: &[u16]) -> Result<()> {
    if data.len() != nx * ny {
        return Err(Error::Dimension(format!(
            "PGM payload is {} samples for a {nx}x{ny} image",
            data.len()
        )));
    }
    let mut buf = Vec::with_capacity(32 + data.len() * 2);
    write!(buf, "P5\n{nx} {ny}\n65535\n").expect("in-memory write");
    for &v in data {
        buf.extend_from_slice(&v.to_be_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Writes an 8-bit P5 (maxval 255).
pub fn write_pgm8(path: &Path, nx: usize, ny: usize, data: &[u8]) -> Result<()> {
    if data.len() != nx * ny {
        return Err(Error::Dimension(format!(
            "PGM payload is {} samples for a {nx}x{ny} image",
            data.len()
        )));
    }
    let mut buf = Vec::with_capacity(32 + data.len());
    write!(buf, "P5\n{nx} {ny}\n255\n").expect("in-memory write");
    buf.extend_from_slice(data);
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Header token scanner: skips whitespace and `#` comments.
fn next_token(bytes: &[u8], pos: &mut usize) -> Option<u64> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if *pos == start {
        return None;
    }
    std::str::from_utf8(&bytes[start..*pos]).ok()?.parse().ok()
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<(usize, usize, u32, usize)> {
    let bad = |reason: &str| Error::Pgm {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(bad("not a binary PGM (missing P5 magic)"));
    }
    let mut pos = 2;
    let nx = next_token(bytes, &mut pos).ok_or_else(|| bad("missing width"))? as usize;
    let ny = next_token(bytes, &mut pos).ok_or_else(|| bad("missing height"))? as usize;
    let maxval = next_token(bytes, &mut pos).ok_or_else(|| bad("missing maxval"))? as u32;
    if nx == 0 || ny == 0 {
        return Err(bad("zero dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(bad("maxval out of range"));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("missing payload separator"));
    }
    pos += 1;
    Ok((nx, ny, maxval, pos))
}

/// Reads a 16-bit P5. Rejects 8-bit files, over-range maxval, and short
/// payloads.
pub fn read_pgm16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (nx, ny, maxval, offset) = parse_header(path, &bytes)?;
    let bad = |reason: String| Error::Pgm {
        path: path.to_path_buf(),
        reason,
    };
    if maxval < 256 {
        return Err(bad("expected a 16-bit PGM (maxval > 255)".into()));
    }
    let need = nx * ny * 2;
    let payload = &bytes[offset..];
    if payload.len() < need {
        return Err(bad(format!(
            "truncated payload: {} of {need} bytes",
            payload.len()
        )));
    }
    let data = payload[..need]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok((nx, ny, data))
}

/// Reads an 8-bit P5.
pub fn read_pgm8(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (nx, ny, maxval, offset) = parse_header(path, &bytes)?;
    let bad = |reason: String| Error::Pgm {
        path: path.to_path_buf(),
        reason,
    };
    if maxval > 255 {
        return Err(bad("expected an 8-bit PGM (maxval <= 255)".into()));
    }
    let need = nx * ny;
    let payload = &bytes[offset..];
    if payload.len() < need {
        return Err(bad(format!(
            "truncated payload: {} of {need} bytes",
            payload.len()
        )));
    }
    Ok((nx, ny, payload[..need].to_vec()))
}
