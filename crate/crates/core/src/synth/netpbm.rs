//! Binary NetPBM: P6 (RGB) and P5 (grayscale), 8-bit.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Single-channel image with values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::dim(format!(
                "{width}x{height} gray image needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn from_bools(width: usize, height: usize, bits: &[bool]) -> Result<Self> {
        Self::new(width, height, bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
    }
}

pub(crate) fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn header(magic: &str, width: usize, height: usize) -> Vec<u8> {
    format!("{magic}\n{width} {height}\n255\n").into_bytes()
}

/// Encodes a `[3,H,W]` (or `[1,3,H,W]`) tensor as P6.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match *image.shape() {
        [3, h, w] | [1, 3, h, w] => (h, w),
        _ => return Err(Error::dim(format!("ppm needs [3,H,W], got {:?}", image.shape()))),
    };
    let plane = h * w;
    let d = image.data();
    let mut out = header("P6", w, h);
    out.reserve(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            out.push(quantize(d[c * plane + i]));
        }
    }
    Ok(out)
}

pub fn encode_pgm(image: &GrayImage) -> Vec<u8> {
    let mut out = header("P5", image.width, image.height);
    out.extend(image.values.iter().map(|&v| quantize(v)));
    out
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    payload_offset: usize,
}

fn skip_space(bytes: &[u8], pos: &mut usize) {
    while *pos < bytes.len() {
        match bytes[*pos] {
            b' ' | b'\t' | b'\n' | b'\r' => *pos += 1,
            b'#' => {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            }
            _ => break,
        }
    }
}

fn read_uint(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    skip_space(bytes, pos);
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format {
            offset: start,
            detail: format!("expected {what}"),
        });
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or(Error::Format {
            offset: start,
            detail: format!("{what} out of range"),
        })
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 {
        return Err(Error::Format {
            offset: 0,
            detail: "file too short for a NetPBM magic".into(),
        });
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let width = read_uint(bytes, &mut pos, "width")?;
    let height = read_uint(bytes, &mut pos, "height")?;
    let maxval = read_uint(bytes, &mut pos, "maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Format {
            offset: pos,
            detail: format!("empty image {width}x{height}"),
        });
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format {
            offset: pos,
            detail: format!("maxval {maxval} is not 8-bit"),
        });
    }
    match bytes.get(pos) {
        Some(b' ' | b'\t' | b'\n' | b'\r') => pos += 1,
        _ => {
            return Err(Error::Format {
                offset: pos,
                detail: "missing whitespace after maxval".into(),
            })
        }
    }
    Ok(Header {
        magic,
        width,
        height,
        maxval,
        payload_offset: pos,
    })
}

fn payload<'a>(bytes: &'a [u8], h: &Header, channels: usize) -> Result<&'a [u8]> {
    let need = h.width * h.height * channels;
    let have = bytes.len() - h.payload_offset;
    if have < need {
        return Err(Error::Format {
            offset: bytes.len(),
            detail: format!("truncated payload: expected {need} bytes, found {have}"),
        });
    }
    Ok(&bytes[h.payload_offset..h.payload_offset + need])
}

fn expect_magic(h: &Header, magic: &[u8; 2]) -> Result<()> {
    if &h.magic != magic {
        return Err(Error::Format {
            offset: 0,
            detail: format!(
                "expected magic {:?}, found {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(&h.magic)
            ),
        });
    }
    Ok(())
}

/// Decodes P6 into a `[3,H,W]` tensor.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let h = parse_header(bytes)?;
    expect_magic(&h, b"P6")?;
    let raw = payload(bytes, &h, 3)?;
    let plane = h.width * h.height;
    let scale = h.maxval as f64;
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f64 / scale;
        }
    }
    Tensor::new(vec![3, h.height, h.width], data)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let h = parse_header(bytes)?;
    expect_magic(&h, b"P5")?;
    let raw = payload(bytes, &h, 1)?;
    let scale = h.maxval as f64;
    GrayImage::new(h.width, h.height, raw.iter().map(|&b| b as f64 / scale).collect())
}

pub fn write_ppm(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    decode_ppm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_pgm(path: impl AsRef<Path>, image: &GrayImage) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(image)).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    decode_pgm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
