//! Binary PPM (P6) and PGM (P5) with maxval 255.

use std::path::Path;

use crate::error::{Error, Result};

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    debug_assert_eq!(rgb.len(), width * height * 3);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    debug_assert_eq!(gray.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self) -> Option<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).ok()?.parse().ok()
    }
}

/// Parse a P5/P6 image, returning `(width, height, samples)`.
pub fn decode(bytes: &[u8], magic: &[u8; 2], channels: usize) -> std::result::Result<(usize, usize, Vec<u8>), String> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(format!("expected magic {}", String::from_utf8_lossy(magic)));
    }
    let mut c = Cursor { bytes, pos: 2 };
    let w = c.number().ok_or("bad width")?;
    let h = c.number().ok_or("bad height")?;
    let max = c.number().ok_or("bad maxval")?;
    if max != 255 {
        return Err(format!("unsupported maxval {max}"));
    }
    if w == 0 || h == 0 {
        return Err("zero image extent".into());
    }
    match bytes.get(c.pos) {
        Some(b) if b.is_ascii_whitespace() => c.pos += 1,
        _ => return Err("missing separator after header".into()),
    }
    let n = w * h * channels;
    let data = &bytes[c.pos..];
    if data.len() != n {
        return Err(format!("expected {n} sample bytes, found {}", data.len()));
    }
    Ok((w, h, data.to_vec()))
}

fn read(path: &Path, magic: &[u8; 2], channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, magic, channels).map_err(|m| Error::format(path, m))
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    read(path, b"P6", 3)
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    read(path, b"P5", 1)
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    std::fs::write(path, encode_ppm(width, height, rgb)).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    std::fs::write(path, encode_pgm(width, height, gray)).map_err(|e| Error::io(path, e))
}
