//! Binary PPM (P6) and PGM (P5) with maxval 255.
//!
//! Writers always emit the canonical header `P6\n{w} {h}\n255\n`; readers
//! accept arbitrary whitespace and `#` comments between header fields.
//! Float pixels are quantized as `round(v * 255)` after clamping to `[0, 1]`,
//! and decoded as `k / 255`, so decode followed by encode is bit-exact.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Greyscale 8-bit raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                "gray image",
                format!("{height}x{width} needs {} values, got {}", height * width, data.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(k: u8) -> f32 {
    k as f32 / 255.0
}

pub fn encode_ppm(image: &ImageTensor) -> Vec<u8> {
    let header = format!("P6\n{} {}\n255\n", image.width(), image.height());
    let mut out = Vec::with_capacity(header.len() + image.data().len());
    out.extend_from_slice(header.as_bytes());
    out.extend(image.data().iter().map(|&v| quantize(v)));
    out
}

pub fn encode_pgm(image: &GrayImage) -> Vec<u8> {
    let header = format!("P5\n{} {}\n255\n", image.width, image.height);
    let mut out = Vec::with_capacity(header.len() + image.data.len());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&image.data);
    out
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    offset: usize,
}

fn parse_header(raw: &[u8]) -> std::result::Result<Header, String> {
    if raw.len() < 2 {
        return Err("truncated header".into());
    }
    let magic = [raw[0], raw[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Skip whitespace and comments.
        loop {
            match raw.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while raw.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while raw.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(format!("expected a number at byte {start}"));
        }
        *field = std::str::from_utf8(&raw[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("number out of range at byte {start}"))?;
    }
    // Exactly one whitespace byte separates maxval from the raster.
    match raw.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err("missing separator after maxval".into()),
    }
    if fields[2] != 255 {
        return Err(format!("unsupported maxval {}", fields[2]));
    }
    Ok(Header {
        magic,
        width: fields[0],
        height: fields[1],
        offset: pos,
    })
}

fn raster<'a>(raw: &'a [u8], expect: &[u8; 2], channels: usize) -> std::result::Result<(Header, &'a [u8]), String> {
    let header = parse_header(raw)?;
    if &header.magic != expect {
        return Err(format!(
            "expected magic {}, found {:?}",
            String::from_utf8_lossy(expect),
            String::from_utf8_lossy(&header.magic)
        ));
    }
    let need = header.width * header.height * channels;
    let body = &raw[header.offset..];
    if body.len() != need {
        return Err(format!("expected {need} raster bytes, found {}", body.len()));
    }
    Ok((header, body))
}

pub fn decode_ppm(raw: &[u8]) -> std::result::Result<ImageTensor, String> {
    let (h, body) = raster(raw, b"P6", 3)?;
    ImageTensor::new(h.height, h.width, body.iter().map(|&k| dequantize(k)).collect())
        .map_err(|e| e.to_string())
}

pub fn decode_pgm(raw: &[u8]) -> std::result::Result<GrayImage, String> {
    let (h, body) = raster(raw, b"P5", 1)?;
    GrayImage::new(h.height, h.width, body.to_vec()).map_err(|e| e.to_string())
}

pub fn read_ppm(path: &Path) -> Result<ImageTensor> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&raw).map_err(|r| Error::format(path, r))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&raw).map_err(|r| Error::format(path, r))
}

pub fn write_ppm(path: &Path, image: &ImageTensor) -> Result<()> {
    std::fs::write(path, encode_ppm(image)).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: &Path, image: &GrayImage) -> Result<()> {
    std::fs::write(path, encode_pgm(image)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ppm_round_trip_is_byte_exact() {
        let (w, h) = (5, 3);
        let bytes: Vec<u8> = (0..w * h * 3).map(|i| (i * 37 % 256) as u8).collect();
        let mut raw = b"P6\n5 3\n255\n".to_vec();
        raw.extend_from_slice(&bytes);
        let image = decode_ppm(&raw).unwrap();
        assert_eq!((image.height(), image.width()), (3, 5));
        assert_eq!(encode_ppm(&image), raw);
    }

    #[test]
    fn header_comments_and_whitespace() {
        let mut raw = b"P5 # gray\n  2\t# width\n1\n255\n".to_vec();
        raw.extend_from_slice(&[7, 200]);
        let g = decode_pgm(&raw).unwrap();
        assert_eq!(g.data, vec![7, 200]);
        assert_eq!(encode_pgm(&g), b"P5\n2 1\n255\n\x07\xc8");
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(decode_ppm(b"P5\n1 1\n255\n\0").is_err());
        assert!(decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\0\0\0").is_err());
        assert!(decode_ppm(b"P6\n").is_err());
        assert!(decode_pgm(b"P5\nx 1\n255\n\0").is_err());
    }

    #[test]
    fn quantize_clamps() {
        assert_eq!(quantize(-0.5), 0);
        assert_eq!(quantize(2.0), 255);
        assert_eq!(quantize(0.5), 128);
    }

    #[test]
    fn missing_file_names_path() {
        let err = read_ppm(Path::new("/nonexistent/img.ppm")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/img.ppm"));
    }

    proptest! {
        #[test]
        fn every_byte_survives(bytes in proptest::collection::vec(any::<u8>(), 12)) {
            let image = ImageTensor::new(2, 2, bytes.iter().map(|&k| dequantize(k)).collect()).unwrap();
            let back: Vec<u8> = encode_ppm(&image)[b"P6\n2 2\n255\n".len()..].to_vec();
            prop_assert_eq!(back, bytes);
        }
    }
}
