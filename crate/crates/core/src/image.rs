//! Small raster types and Netpbm (PPM/PGM) I/O.

use std::io::{self, Write};
use std::path::Path;

/// Interleaved RGB image with channel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Border-clamped bilinear sample at continuous pixel coordinates
    /// (pixel centres at +0.5).
    pub fn sample(&self, u: f64, v: f64) -> [f64; 3] {
        let mut out = [0.0f64; 3];
        let fx = (u - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (v - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let (wx, wy) = (fx - x0 as f64, fy - y0 as f64);
        let (a, b, c, d) = (self.get(x0, y0), self.get(x1, y0), self.get(x0, y1), self.get(x1, y1));
        for ch in 0..3 {
            out[ch] = (1.0 - wy) * ((1.0 - wx) * a[ch] as f64 + wx * b[ch] as f64)
                + wy * ((1.0 - wx) * c[ch] as f64 + wx * d[ch] as f64);
        }
        out
    }
}

fn header(kind: &str, w: usize, h: usize, maxval: u32) -> Vec<u8> {
    format!("{kind}\n{w} {h}\n{maxval}\n").into_bytes()
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = header("P6", img.width, img.height, 255);
    out.extend(img.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// 8-bit PGM.
pub fn encode_pgm8(width: usize, height: usize, values: &[u8]) -> Vec<u8> {
    let mut out = header("P5", width, height, 255);
    out.extend_from_slice(values);
    out
}

/// 16-bit big-endian PGM (Netpbm convention).
pub fn encode_pgm16(width: usize, height: usize, values: &[u16]) -> Vec<u8> {
    let mut out = header("P5", width, height, 65535);
    for v in values {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

fn parse_header(bytes: &[u8]) -> io::Result<(String, usize, usize, u32, usize)> {
    let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated netpbm header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
    }
    pos += 1;
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad netpbm number"));
    Ok((fields[0].clone(), num(&fields[1])?, num(&fields[2])?, num(&fields[3])? as u32, pos))
}

pub fn decode_ppm(bytes: &[u8]) -> io::Result<RgbImage> {
    let (kind, w, h, maxval, pos) = parse_header(bytes)?;
    if kind != "P6" || maxval != 255 || bytes.len() < pos + w * h * 3 {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "unsupported PPM"));
    }
    Ok(RgbImage {
        width: w,
        height: h,
        data: bytes[pos..pos + w * h * 3].iter().map(|&b| b as f32 / 255.0).collect(),
    })
}

/// Returns the PGM samples widened to u16.
pub fn decode_pgm(bytes: &[u8]) -> io::Result<(usize, usize, Vec<u16>)> {
    let (kind, w, h, maxval, pos) = parse_header(bytes)?;
    let bad = || io::Error::new(io::ErrorKind::InvalidData, "unsupported PGM");
    if kind != "P5" {
        return Err(bad());
    }
    let n = w * h;
    if maxval < 256 {
        let data = bytes.get(pos..pos + n).ok_or_else(bad)?;
        Ok((w, h, data.iter().map(|&b| b as u16).collect()))
    } else {
        let data = bytes.get(pos..pos + 2 * n).ok_or_else(bad)?;
        Ok((w, h, data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()))
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> io::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(bytes)
}
