//! Binary PPM (P6) images with 8-bit samples.

use std::fs;
use std::path::Path;

use crate::error::{Error, IoContext, Result};

/// Interleaved RGB pixels, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height * 3] }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

pub fn encode(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

/// Parses a P6 file. Header comments are allowed; maxval must be 255.
pub fn decode(bytes: &[u8]) -> std::result::Result<RgbImage, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<&[u8], String> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        Ok(&bytes[start..pos])
    };
    if token()? != b"P6" {
        return Err("not a binary PPM (P6) file".into());
    }
    let mut number = |what: &str| -> std::result::Result<usize, String> {
        let t = token()?;
        std::str::from_utf8(t).ok().and_then(|s| s.parse().ok()).ok_or_else(|| format!("bad {what} in header"))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if maxval != 255 {
        return Err(format!("maxval {maxval} unsupported, expected 255"));
    }
    if width == 0 || height == 0 {
        return Err("empty image".into());
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = pos + 1;
    let len = width * height * 3;
    let data = bytes.get(start..start + len).ok_or_else(|| format!("raster holds fewer than {len} bytes"))?;
    if bytes.len() != start + len {
        return Err(format!("{} trailing bytes after raster", bytes.len() - start - len));
    }
    Ok(RgbImage { width, height, data: data.to_vec() })
}

pub fn read(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).at(path)?;
    decode(&bytes).map_err(|m| Error::format(path, m))
}

pub fn write(path: &Path, img: &RgbImage) -> Result<()> {
    fs::write(path, encode(img)).at(path)
}
