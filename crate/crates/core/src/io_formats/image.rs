use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major, channel-interleaved grid of `f64` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Value(format!(
                "raster {height}x{width}x{channels} needs {} samples, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }
}

/// Writes a single-channel raster as a 16-bit binary PGM.
///
/// Samples are quantized linearly between their minimum and maximum, which
/// are recorded in a `# range <min> <max>` comment so [`read_pgm`] can undo
/// the quantization. A constant raster stores zeros.
pub fn write_pgm(raster: &Raster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_pgm(raster)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn encode_pgm(raster: &Raster) -> Result<Vec<u8>> {
    if raster.channels != 1 {
        return Err(Error::Value(format!("PGM needs one channel, got {}", raster.channels)));
    }
    if let Some(v) = raster.data.iter().find(|v| !v.is_finite()) {
        return Err(Error::Value(format!("non-finite depth {v}")));
    }
    let (min, max) = raster
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let (min, max) = if raster.data.is_empty() { (0.0, 0.0) } else { (min, max) };
    let span = max - min;
    let mut out = format!("P5\n# range {min} {max}\n{} {}\n65535\n", raster.width, raster.height).into_bytes();
    for &v in &raster.data {
        let q = if span > 0.0 {
            ((v - min) / span * 65535.0).round().clamp(0.0, 65535.0) as u16
        } else {
            0
        };
        out.extend_from_slice(&q.to_be_bytes());
    }
    Ok(out)
}

struct PnmHeader {
    magic: String,
    width: usize,
    height: usize,
    maxval: usize,
    range: Option<(f64, f64)>,
    data_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<PnmHeader> {
    let mut fields = Vec::with_capacity(4);
    let mut range = None;
    let mut pos = 0;
    while fields.len() < 4 {
        match bytes.get(pos) {
            None => return Err(Error::Format("PNM header ends early".into())),
            Some(b'#') => {
                let end = bytes[pos..]
                    .iter()
                    .position(|&b| b == b'\n')
                    .map_or(bytes.len(), |e| pos + e);
                let comment = String::from_utf8_lossy(&bytes[pos + 1..end]);
                let mut parts = comment.split_whitespace();
                if parts.next() == Some("range") {
                    let lo = parts.next().and_then(|s| s.parse::<f64>().ok());
                    let hi = parts.next().and_then(|s| s.parse::<f64>().ok());
                    if let (Some(lo), Some(hi)) = (lo, hi) {
                        range = Some((lo, hi));
                    }
                }
                pos = end + 1;
            }
            Some(b) if b.is_ascii_whitespace() => pos += 1,
            Some(_) => {
                let start = pos;
                while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
                    pos += 1;
                }
                fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
            }
        }
    }
    // exactly one whitespace byte separates maxval from the raster
    pos += 1;
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad PNM header field {s:?}")))
    };
    Ok(PnmHeader {
        magic: fields[0].clone(),
        width: num(&fields[1])?,
        height: num(&fields[2])?,
        maxval: num(&fields[3])?,
        range,
        data_offset: pos,
    })
}

fn read_samples(bytes: &[u8], header: &PnmHeader, count: usize) -> Result<Vec<u32>> {
    if header.maxval == 0 || header.maxval > 65535 {
        return Err(Error::Format(format!("bad maxval {}", header.maxval)));
    }
    let wide = header.maxval > 255;
    let width = if wide { 2 } else { 1 };
    let body = bytes.get(header.data_offset..).unwrap_or(&[]);
    if body.len() < count * width {
        return Err(Error::Truncation {
            expected: header.data_offset + count * width,
            found: bytes.len(),
        });
    }
    Ok(if wide {
        body.chunks_exact(2)
            .take(count)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as u32)
            .collect()
    } else {
        body[..count].iter().map(|&b| b as u32).collect()
    })
}

/// Reads a binary PGM. When a `# range` comment is present the samples are
/// mapped back onto that range, otherwise they are scaled to `[0, 1]`.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes)
}

fn decode_pgm(bytes: &[u8]) -> Result<Raster> {
    let header = parse_header(bytes)?;
    if header.magic != "P5" {
        return Err(Error::Format(format!("expected P5, found {}", header.magic)));
    }
    let count = header.width * header.height;
    let samples = read_samples(bytes, &header, count)?;
    let maxval = header.maxval as f64;
    let data = match header.range {
        Some((lo, hi)) => samples.iter().map(|&q| lo + (q as f64 / maxval) * (hi - lo)).collect(),
        None => samples.iter().map(|&q| q as f64 / maxval).collect(),
    };
    Raster::new(header.height, header.width, 1, data)
}

/// Writes a three-channel raster with samples in `[0, 1]` as an 8-bit PPM.
/// Out-of-range samples are clamped.
pub fn write_ppm(raster: &Raster, path: impl AsRef<Path>) -> Result<()> {
    if raster.channels != 3 {
        return Err(Error::Value(format!(
            "PPM needs three channels, got {}",
            raster.channels
        )));
    }
    if let Some(v) = raster.data.iter().find(|v| !v.is_finite()) {
        return Err(Error::Value(format!("non-finite pixel {v}")));
    }
    let mut out = format!("P6\n{} {}\n255\n", raster.width, raster.height).into_bytes();
    out.extend(raster.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let path = path.as_ref();
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = parse_header(&bytes)?;
    if header.magic != "P6" {
        return Err(Error::Format(format!("expected P6, found {}", header.magic)));
    }
    let count = header.width * header.height * 3;
    let maxval = header.maxval as f64;
    let data = read_samples(&bytes, &header, count)?
        .into_iter()
        .map(|q| q as f64 / maxval)
        .collect();
    Raster::new(header.height, header.width, 3, data)
}
