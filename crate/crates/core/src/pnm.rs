//! Binary PPM (P6) and PGM (P5) images.

use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    /// 3 for P6, 1 for P5.
    pub channels: usize,
    pub maxval: u16,
    /// Interleaved samples, row-major.
    pub samples: Vec<u16>,
    pub comments: Vec<String>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    comments: Vec<String>,
}

impl Cursor<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c => self.pos += 1,
                b'#' => {
                    let start = self.pos + 1;
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                    let text = String::from_utf8_lossy(&self.bytes[start..self.pos]);
                    self.comments.push(text.trim().to_string());
                }
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Format(format!("PNM header: expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("PNM header: {what} out of range")))
    }
}

/// Parses a P5 or P6 file.
pub fn decode(bytes: &[u8]) -> Result<Pnm> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(Error::Format("not a binary PPM/PGM (expected P5 or P6)".into())),
    };
    let mut cur = Cursor {
        bytes,
        pos: 2,
        comments: Vec::new(),
    };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Format("PNM image has a zero extent".into()));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("PNM maxval {maxval} outside 1..=65535")));
    }
    match bytes.get(cur.pos) {
        Some(c) if c.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(Error::Format("PNM header must end in one whitespace byte".into())),
    }
    let wide = maxval > 255;
    let count = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| Error::Format("PNM extents overflow".into()))?;
    let need = count
        .checked_mul(if wide { 2 } else { 1 })
        .ok_or_else(|| Error::Format("PNM extents overflow".into()))?;
    let raster = &bytes[cur.pos..];
    if raster.len() != need {
        return Err(Error::Format(format!("PNM raster has {} bytes, expected {need}", raster.len())));
    }
    let samples: Vec<u16> = if wide {
        raster.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    } else {
        raster.iter().map(|&b| b as u16).collect()
    };
    if let Some(&bad) = samples.iter().find(|&&s| s as usize > maxval) {
        return Err(Error::Format(format!("PNM sample {bad} exceeds maxval {maxval}")));
    }
    Ok(Pnm {
        width,
        height,
        channels,
        maxval: maxval as u16,
        samples,
        comments: cur.comments,
    })
}

pub fn encode(p: &Pnm) -> Vec<u8> {
    let magic = if p.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n");
    for c in &p.comments {
        out.push_str(&format!("# {c}\n"));
    }
    out.push_str(&format!("{} {}\n{}\n", p.width, p.height, p.maxval));
    let mut bytes = out.into_bytes();
    if p.maxval > 255 {
        for s in &p.samples {
            bytes.extend_from_slice(&s.to_be_bytes());
        }
    } else {
        bytes.extend(p.samples.iter().map(|&s| s as u8));
    }
    bytes
}

impl Pnm {
    /// `[1, C, H, W]` tensor with samples divided by `maxval`.
    pub fn to_tensor(&self) -> Tensor {
        let (h, w, c) = (self.height, self.width, self.channels);
        let scale = self.maxval as f64;
        Tensor::from_fn(&[1, c, h, w], |i| {
            let ch = i / (h * w);
            let px = i % (h * w);
            self.samples[px * c + ch] as f64 / scale
        })
    }

    /// Quantizes a `[1, C, H, W]` tensor (C = 1 or 3) with values in
    /// `[0, 1]`; values outside are clamped.
    pub fn from_tensor(t: &Tensor, maxval: u16) -> Result<Pnm> {
        let (n, c, h, w) = t.dims4()?;
        if n != 1 || (c != 1 && c != 3) {
            return Err(shape_err!("PNM export needs [1, 1|3, H, W], got {:?}", t.shape()));
        }
        if !t.all_finite() {
            return Err(Error::Domain("cannot export non-finite values as an image".into()));
        }
        let mut samples = vec![0u16; c * h * w];
        for ch in 0..c {
            for (px, &v) in t.plane(0, ch).iter().enumerate() {
                samples[px * c + ch] = quantize(v, maxval);
            }
        }
        Ok(Pnm {
            width: w,
            height: h,
            channels: c,
            maxval,
            samples,
            comments: Vec::new(),
        })
    }
}

pub fn quantize(v: f64, maxval: u16) -> u16 {
    (v.clamp(0.0, 1.0) * maxval as f64).round() as u16
}

pub fn read(path: impl AsRef<Path>) -> Result<Pnm> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write(path: impl AsRef<Path>, p: &Pnm) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(p)).map_err(|e| Error::io(path, e))
}

/// Reads an RGB image as a `[1, 3, H, W]` tensor in `[0, 1]`.
pub fn read_rgb(path: impl AsRef<Path>) -> Result<Tensor> {
    let p = read(path.as_ref())?;
    if p.channels != 3 {
        return Err(Error::Format(format!("{} is not an RGB (P6) image", path.as_ref().display())));
    }
    Ok(p.to_tensor())
}

pub fn write_rgb(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    write(path, &Pnm::from_tensor(image, 255)?)
}

/// Reads a grey image as a `[1, 1, H, W]` tensor in `[0, 1]`.
pub fn read_gray(path: impl AsRef<Path>) -> Result<Tensor> {
    let p = read(path.as_ref())?;
    if p.channels != 1 {
        return Err(Error::Format(format!("{} is not a greyscale (P5) image", path.as_ref().display())));
    }
    Ok(p.to_tensor())
}

/// Writes an 8-bit mask, values 0 or 255 for binary masks.
pub fn write_mask(path: impl AsRef<Path>, mask: &Tensor) -> Result<()> {
    write(path, &Pnm::from_tensor(mask, 255)?)
}

/// Writes a density for viewing: 16-bit, scaled so the maximum maps to
/// 65535. The scale is recorded in a header comment since it cannot be
/// recovered from the samples.
pub fn write_density(path: impl AsRef<Path>, density: &Tensor) -> Result<()> {
    let max = density.max();
    let scaled = if max > 0.0 { density.scale(1.0 / max) } else { density.clone() };
    let mut p = Pnm::from_tensor(&scaled, u16::MAX)?;
    p.comments.push(format!("lossy: density scaled by 1/max, max={max:e}"));
    write(path, &p)
}
