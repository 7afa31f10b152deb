//! Binary netpbm: P6 colour images and P5 grayscale / label maps, maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// An 8-bit grayscale raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

fn header(magic: &str, width: usize, height: usize) -> Vec<u8> {
    format!("{magic}\n{width} {height}\n255\n").into_bytes()
}

/// Quantizes a 1×3×H×W image in [0,1] to interleaved RGB bytes.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let [n, c, h, w] = image.shape().dims();
    if n != 1 || c != 3 {
        return Err(Error::Format(format!(
            "ppm needs a 1×3×H×W image, got {}",
            image.shape()
        )));
    }
    let plane = h * w;
    let mut out = header("P6", w, h);
    out.reserve(3 * plane);
    let d = image.data();
    for p in 0..plane {
        for ch in 0..3 {
            out.push((d[ch * plane + p] * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(out)
}

pub fn encode_pgm(g: &Gray) -> Result<Vec<u8>> {
    if g.pixels.len() != g.width * g.height || g.width == 0 || g.height == 0 {
        return Err(Error::Format(format!(
            "pgm {}×{} with {} pixels",
            g.width,
            g.height,
            g.pixels.len()
        )));
    }
    let mut out = header("P5", g.width, g.height);
    out.extend_from_slice(&g.pixels);
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("malformed header: expected {what}")))
    }
}

/// Parses a header with the given magic, returning (width, height, payload).
fn decode<'a>(
    bytes: &'a [u8],
    magic: &[u8; 2],
    channels: usize,
) -> Result<(usize, usize, &'a [u8])> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::Format(format!(
            "malformed header: expected magic {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Format(format!(
            "malformed header: zero extent {width}×{height}"
        )));
    }
    if maxval != 255 {
        return Err(Error::Format(format!(
            "maxval {maxval} unsupported, expected 255"
        )));
    }
    if !cur.bytes.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format(
            "malformed header: missing whitespace after maxval".into(),
        ));
    }
    let start = cur.pos + 1;
    let need = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| Error::Format("image extents overflow".into()))?;
    let payload = &bytes[start..];
    if payload.len() < need {
        return Err(Error::Format(format!(
            "truncated payload: {} of {need} bytes",
            payload.len()
        )));
    }
    if payload.len() > need {
        return Err(Error::Format(format!(
            "{} trailing bytes after payload",
            payload.len() - need
        )));
    }
    Ok((width, height, payload))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let (w, h, payload) = decode(bytes, b"P6", 3)?;
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    for (p, px) in payload.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            data[ch * plane + p] = f64::from(px[ch]) / 255.0;
        }
    }
    Tensor::from_vec(Shape::new(1, 3, h, w), data)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Gray> {
    let (width, height, payload) = decode(bytes, b"P5", 1)?;
    Ok(Gray {
        width,
        height,
        pixels: payload.to_vec(),
    })
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    fs::write(path, with_path(path, encode_ppm(image))?)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    with_path(path, decode_ppm(&fs::read(path)?))
}

pub fn write_pgm(path: &Path, g: &Gray) -> Result<()> {
    fs::write(path, with_path(path, encode_pgm(g))?)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<Gray> {
    with_path(path, decode_pgm(&fs::read(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_pixel_file_is_header_plus_three_bytes() {
        let img = Tensor::full(Shape::new(1, 3, 1, 1), 1.0);
        let bytes = encode_ppm(&img).unwrap();
        assert_eq!(bytes, b"P6\n1 1\n255\n\xff\xff\xff");
        assert_eq!(bytes.len(), 14);
    }

    #[test]
    fn round_trips() {
        let g = Gray {
            width: 3,
            height: 2,
            pixels: vec![0, 1, 2, 3, 255, 7],
        };
        assert_eq!(decode_pgm(&encode_pgm(&g).unwrap()).unwrap(), g);
        let data: Vec<f64> = (0..12).map(|i| (i * 20) as f64 / 255.0).collect();
        let img = Tensor::from_vec(Shape::new(1, 3, 2, 2), data).unwrap();
        let bytes = encode_ppm(&img).unwrap();
        assert_eq!(decode_ppm(&bytes).unwrap(), img);
        assert_eq!(encode_ppm(&decode_ppm(&bytes).unwrap()).unwrap(), bytes);
    }

    #[test]
    fn comments_in_header() {
        let bytes = b"P5\n# made by hand\n2 1\n255\n\x01\x02";
        assert_eq!(decode_pgm(bytes).unwrap().pixels, vec![1, 2]);
    }

    #[test]
    fn rejects_malformed() {
        assert!(decode_pgm(b"P6\n1 1\n255\n\x00").is_err());
        assert!(decode_pgm(b"P5\n1 1\n65535\n\x00\x00").is_err());
        assert!(decode_pgm(b"P5\n2 2\n255\n\x00")
            .unwrap_err()
            .to_string()
            .contains("truncated"));
        assert!(decode_pgm(b"P5\nx 2\n255\n").is_err());
        assert!(decode_ppm(b"P6\n1 1\n255\n\x00\x00").is_err());
    }
}
