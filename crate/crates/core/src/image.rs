//! RGB images and their two on-disk forms: binary PPM (8-bit) and the raw
//! float-channel format `CRFDIMG <w> <h> <channels>\n` + little-endian f32.

use std::path::Path;

use crate::error::{Error, Result};

/// Row-major RGB image with channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn parse_header_tokens<'a>(bytes: &'a [u8], count: usize, path: &Path) -> Result<(Vec<&'a str>, usize)> {
    let mut tokens = Vec::with_capacity(count);
    let mut pos = 0;
    while tokens.len() < count {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::malformed(path, "truncated header"));
        }
        let tok = std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::malformed(path, "header is not ascii"))?;
        tokens.push(tok);
    }
    // exactly one whitespace byte separates the header from the payload
    if pos >= bytes.len() {
        return Err(Error::malformed(path, "missing pixel data"));
    }
    Ok((tokens, pos + 1))
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Image> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::shape("image", format!("{width}x{height} with {} values", data.len())));
        }
        Ok(Image { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Image {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Image { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// 8-bit values, rounded after clamping to `[0, 1]`.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_byte(v)).collect()
    }

    /// The image as it survives an 8-bit round trip.
    pub fn quantized(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.to_bytes().into_iter().map(|b| b as f64 / 255.0).collect(),
        }
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_bytes());
        out
    }

    pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Image> {
        let (tok, start) = parse_header_tokens(bytes, 4, path)?;
        if tok[0] != "P6" {
            return Err(Error::malformed(path, format!("expected P6 magic, got {:?}", tok[0])));
        }
        let dim = |s: &str, what: &str| {
            s.parse::<usize>()
                .ok()
                .filter(|&v| v > 0)
                .ok_or_else(|| Error::malformed(path, format!("bad {what} {s:?}")))
        };
        let (w, h) = (dim(tok[1], "width")?, dim(tok[2], "height")?);
        if tok[3] != "255" {
            return Err(Error::malformed(path, format!("maxval must be 255, got {}", tok[3])));
        }
        let payload = &bytes[start..];
        if payload.len() != w * h * 3 {
            return Err(Error::malformed(
                path,
                format!("pixel data has {} bytes, expected {}", payload.len(), w * h * 3),
            ));
        }
        Ok(Image {
            width: w,
            height: h,
            data: payload.iter().map(|&b| b as f64 / 255.0).collect(),
        })
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: &Path) -> Result<Image> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_ppm(&bytes, path)
    }

    /// Bilinear resize with pixel-center alignment; returns `[3×H×W]` planes.
    pub fn resized_planes(&self, width: usize, height: usize) -> Vec<f64> {
        let mut out = vec![0.0; 3 * width * height];
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let coord = |o: usize, s: f64, n: usize| {
            let c = ((o as f64 + 0.5) * s - 0.5).clamp(0.0, (n - 1) as f64);
            let lo = (c.floor() as usize).min(n.saturating_sub(2));
            let t = if n > 1 { c - lo as f64 } else { 0.0 };
            (lo, (lo + 1).min(n - 1), t)
        };
        for y in 0..height {
            let (y0, y1, ty) = coord(y, sy, self.height);
            for x in 0..width {
                let (x0, x1, tx) = coord(x, sx, self.width);
                let (a, b, c, d) = (self.pixel(x0, y0), self.pixel(x1, y0), self.pixel(x0, y1), self.pixel(x1, y1));
                for k in 0..3 {
                    let top = a[k] + tx * (b[k] - a[k]);
                    let bot = c[k] + tx * (d[k] - c[k]);
                    out[(k * height + y) * width + x] = top + ty * (bot - top);
                }
            }
        }
        out
    }
}

/// Interleaved float channels with the `CRFDIMG` header.
pub fn encode_float_channels(width: usize, height: usize, channels: &[&[f64]]) -> Result<Vec<u8>> {
    if channels.is_empty() || channels.iter().any(|c| c.len() != width * height) {
        return Err(Error::shape("float channels", format!("{} channels for {width}x{height}", channels.len())));
    }
    let mut out = format!("CRFDIMG {width} {height} {}\n", channels.len()).into_bytes();
    for i in 0..width * height {
        for c in channels {
            out.extend_from_slice(&(c[i] as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Inverse of [`encode_float_channels`]: `(width, height, channels)`.
pub fn decode_float_channels(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<Vec<f32>>)> {
    let (tok, start) = parse_header_tokens(bytes, 4, path)?;
    if tok[0] != "CRFDIMG" {
        return Err(Error::malformed(path, "missing CRFDIMG header"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::malformed(path, format!("bad header field {s:?}")));
    let (w, h, c) = (num(tok[1])?, num(tok[2])?, num(tok[3])?);
    let payload = &bytes[start..];
    if payload.len() != w * h * c * 4 {
        return Err(Error::malformed(path, format!("payload has {} bytes, expected {}", payload.len(), w * h * c * 4)));
    }
    let mut channels = vec![Vec::with_capacity(w * h); c];
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        channels[i % c].push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    Ok((w, h, channels))
}
