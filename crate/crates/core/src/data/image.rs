//! Netpbm codecs and the geometric transforms used by the input pipeline.
//!
//! Transforms operate on planar `[C, H, W]` float buffers.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{DataError, Result};

/// 8-bit interleaved RGB.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Planar `[3, H, W]` floats on the 0..=255 scale.
    pub fn to_planar(&self) -> Vec<f32> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; 3 * plane];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = f32::from(px[c]);
            }
        }
        out
    }
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8]) -> std::result::Result<Header, String> {
    if bytes.len() < 2 {
        return Err("file too short".into());
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
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
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("malformed header field")?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("missing whitespace after maxval".into());
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(format!("bad dimensions {width}x{height} maxval {maxval}"));
    }
    Ok(Header {
        magic,
        width,
        height,
        maxval,
        offset: pos + 1,
    })
}

/// Decodes a binary PPM (P6). 16-bit samples are rescaled to 8 bits.
pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<RgbImage, String> {
    let h = parse_header(bytes)?;
    if &h.magic != b"P6" {
        return Err("not a binary PPM (P6)".into());
    }
    let wide = h.maxval > 255;
    let n = h.width * h.height * 3;
    let need = n * if wide { 2 } else { 1 };
    let payload = bytes
        .get(h.offset..h.offset + need)
        .ok_or_else(|| format!("expected {need} payload bytes"))?;
    let data = if wide {
        payload
            .chunks_exact(2)
            .map(|b| ((u16::from_be_bytes([b[0], b[1]]) as usize * 255 + h.maxval / 2) / h.maxval) as u8)
            .collect()
    } else if h.maxval == 255 {
        payload.to_vec()
    } else {
        payload
            .iter()
            .map(|&b| ((b as usize * 255 + h.maxval / 2) / h.maxval).min(255) as u8)
            .collect()
    };
    Ok(RgbImage {
        width: h.width,
        height: h.height,
        data,
    })
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode_ppm(&bytes).map_err(|detail| DataError::Decode {
        path: path.to_path_buf(),
        detail,
    })
}

/// Decodes the file to confirm it is readable and returns `(width, height)`.
pub fn probe_ppm(path: &Path) -> Result<(usize, usize)> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode_ppm(&bytes)
        .map(|img| (img.width, img.height))
        .map_err(|detail| DataError::Decode {
            path: path.to_path_buf(),
            detail,
        })
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    fs::write(path, encode_ppm(img)).map_err(|e| DataError::io(path, e))
}

/// Binary 8-bit grayscale PGM (P5).
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    assert_eq!(pixels.len(), width * height);
    let mut f = fs::File::create(path).map_err(|e| DataError::io(path, e))?;
    write!(f, "P5\n{width} {height}\n255\n")
        .and_then(|_| f.write_all(pixels))
        .map_err(|e| DataError::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    let decode = || -> std::result::Result<_, String> {
        let h = parse_header(&bytes)?;
        if &h.magic != b"P5" || h.maxval > 255 {
            return Err("not an 8-bit binary PGM (P5)".into());
        }
        let px = bytes
            .get(h.offset..h.offset + h.width * h.height)
            .ok_or("truncated payload")?;
        Ok((h.width, h.height, px.to_vec()))
    };
    decode().map_err(|detail| DataError::Decode {
        path: path.to_path_buf(),
        detail,
    })
}

/// Bilinear resize to `out_h × out_w` with half-pixel centers.
pub fn resize_bilinear(src: &[f32], c: usize, h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    if (h, w) == (out_h, out_w) {
        return src.to_vec();
    }
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_in as f32 / n_out as f32;
        (0..n_out)
            .map(|o| {
                let s = ((o as f32 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f32);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, s - i0 as f32)
            })
            .collect()
    };
    let (ys, xs) = (axis(h, out_h), axis(w, out_w));
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let p = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                let bot = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

/// Mirrors each row in place.
pub fn hflip(buf: &mut [f32], c: usize, h: usize, w: usize) {
    for row in buf[..c * h * w].chunks_exact_mut(w) {
        row.reverse();
    }
}

/// Reflects an index into `[0, n)` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let r = i.rem_euclid(period);
    (if r >= n as isize { period - r } else { r }) as usize
}

/// Rotates about the image center by `degrees` (counter-clockwise), sampling
/// bilinearly with reflect padding.
pub fn rotate(src: &[f32], c: usize, h: usize, w: usize, degrees: f32) -> Vec<f32> {
    if degrees == 0.0 {
        return src.to_vec();
    }
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
    let mut out = vec![0.0; c * h * w];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f32 - cx, y as f32 - cy);
            // inverse map: rotate the output coordinate back by -degrees
            let sx = cos * dx - sin * dy + cx;
            let sy = sin * dx + cos * dy + cy;
            let (fx, fy) = (sx.floor(), sy.floor());
            let (ax, ay) = (sx - fx, sy - fy);
            let (x0, y0) = (fx as isize, fy as isize);
            let (x0r, x1r) = (reflect(x0, w), reflect(x0 + 1, w));
            let (y0r, y1r) = (reflect(y0, h), reflect(y0 + 1, h));
            for ch in 0..c {
                let p = &src[ch * h * w..];
                let top = p[y0r * w + x0r] * (1.0 - ax) + p[y0r * w + x1r] * ax;
                let bot = p[y1r * w + x0r] * (1.0 - ax) + p[y1r * w + x1r] * ax;
                out[ch * h * w + y * w + x] = top * (1.0 - ay) + bot * ay;
            }
        }
    }
    out
}
