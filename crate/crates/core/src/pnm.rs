//! Binary PPM (P6) and PGM (P5) reading and writing.
//!
//! Headers follow the netpbm convention: magic, whitespace-separated
//! width/height/maxval with `#` comments allowed between tokens, a
//! single whitespace byte, then the raster. Maxval is always 255 here.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

fn encode_header(magic: &str, w: usize, h: usize) -> Vec<u8> {
    format!("{magic}\n{w} {h}\n255\n").into_bytes()
}

pub fn encode_ppm(w: usize, h: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), w * h * 3, "P6 raster size mismatch");
    let mut out = encode_header("P6", w, h);
    out.extend_from_slice(rgb);
    out
}

pub fn encode_pgm(w: usize, h: usize, gray: &[u8]) -> Vec<u8> {
    assert_eq!(gray.len(), w * h, "P5 raster size mismatch");
    let mut out = encode_header("P5", w, h);
    out.extend_from_slice(gray);
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Cursor<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::malformed(self.path, self.pos, msg)
    }

    /// Skip whitespace and `#` comments.
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<&'a [u8]> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err("unexpected end of header"));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Result<usize> {
        let tok = self.token()?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| self.err(format!("expected a number, got {:?}", String::from_utf8_lossy(tok))))
    }
}

fn decode(bytes: &[u8], path: &str, magic: &[u8], channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        path,
    };
    let m = cur.token()?;
    if m != magic {
        return Err(cur.err(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(m),
            String::from_utf8_lossy(magic)
        )));
    }
    let w = cur.number()?;
    let h = cur.number()?;
    let maxval = cur.number()?;
    if maxval != 255 {
        return Err(cur.err(format!("unsupported maxval {maxval}, expected 255")));
    }
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(cur.err("missing whitespace before raster"));
    }
    cur.pos += 1;
    let need = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| cur.err("raster size overflow"))?;
    let raster = &bytes[cur.pos..];
    if raster.len() != need {
        return Err(cur.err(format!(
            "raster has {} bytes, expected {need}",
            raster.len()
        )));
    }
    Ok((w, h, raster.to_vec()))
}

pub fn decode_ppm(bytes: &[u8], path: &str) -> Result<(usize, usize, Vec<u8>)> {
    decode(bytes, path, b"P6", 3)
}

pub fn decode_pgm(bytes: &[u8], path: &str) -> Result<(usize, usize, Vec<u8>)> {
    decode(bytes, path, b"P5", 1)
}

pub fn write_ppm(path: &Path, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    fs::write(path, encode_ppm(w, h, rgb)).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn write_pgm(path: &Path, w: usize, h: usize, gray: &[u8]) -> Result<()> {
    fs::write(path, encode_pgm(w, h, gray)).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode_ppm(&bytes, &path.display().to_string())
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode_pgm(&bytes, &path.display().to_string())
}
