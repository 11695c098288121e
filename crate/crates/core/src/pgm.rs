//! 8-bit binary PGM (P5) images.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// A grayscale image with intensities in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::InvalidShape {
                op: "image",
                detail: format!("{height}x{width} image with {} pixels", pixels.len()),
            });
        }
        Ok(Image {
            height,
            width,
            pixels,
        })
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }
}

/// Rounds `v · 255` to the nearest level after clamping `v` to `[0, 1]`.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode(img: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.pixels.iter().map(|&v| quantize(v)));
    out
}

pub fn write_bytes(path: &Path, height: usize, width: usize, levels: &[u8]) -> Result<()> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(levels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn save(img: &Image, path: &Path) -> Result<()> {
    fs::write(path, encode(img)).map_err(|e| Error::io(path, e))
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Image> {
    let bad = |d: &str| Error::format(path, format!("PGM: {d}"));
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(&bytes[start..pos]);
    }
    if fields[0] != b"P5" {
        return Err(bad("not a binary graymap"));
    }
    let num = |f: &[u8]| -> Result<usize> {
        std::str::from_utf8(f)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad header number"))
    };
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("only 8-bit images are supported"));
    }
    pos += 1;
    let body = bytes.get(pos..).unwrap_or(&[]);
    if body.len() != width * height {
        return Err(bad("pixel count does not match header"));
    }
    Image::new(height, width, body.iter().map(|&b| b as f64 / 255.0).collect())
        .map_err(|_| bad("empty image"))
}

pub fn load(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
