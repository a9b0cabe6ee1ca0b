//! PFM and 16-bit PGM images.
//!
//! PFM files are written little-endian (scale `-1.0`) with rows stored
//! bottom to top, as the format requires. Invalid depth pixels are stored
//! as `0.0` and read back as invalid. PGM depth uses [`PGM_COUNTS_PER_METER`]
//! counts per meter with `0` meaning invalid.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use fadn_core::{DepthMap, ImageRGB, LatentGrid};

use crate::error::{format_err, io_err, Result};

pub const PGM_COUNTS_PER_METER: f64 = 256.0;

/// Raw float raster read from a PFM file, rows top to bottom.
#[derive(Debug, Clone, PartialEq)]
pub struct PfmImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

/// Splits `count` whitespace-separated header tokens off the front of `bytes`,
/// consuming exactly one whitespace byte after the last token.
fn header_tokens(bytes: &[u8], count: usize) -> Option<(Vec<String>, usize)> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return None;
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if i >= bytes.len() {
        return None;
    }
    Some((tokens, i + 1))
}

pub fn encode_pfm(width: usize, height: usize, channels: usize, data: &[f32]) -> Vec<u8> {
    assert!(channels == 1 || channels == 3);
    assert_eq!(data.len(), width * height * channels);
    let magic = if channels == 1 { "Pf" } else { "PF" };
    let mut out = format!("{magic}\n{width} {height}\n-1.0\n").into_bytes();
    out.reserve(data.len() * 4);
    let row = width * channels;
    for y in (0..height).rev() {
        for v in &data[y * row..(y + 1) * row] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<PfmImage> {
    let (tokens, start) = header_tokens(bytes, 4).ok_or_else(|| format_err(path, "truncated PFM header"))?;
    let channels = match tokens[0].as_str() {
        "Pf" => 1,
        "PF" => 3,
        m => return Err(format_err(path, format!("not a PFM file (magic {m:?})"))),
    };
    let dim = |s: &str| s.parse::<usize>().ok().filter(|&v| v > 0);
    let (width, height) = match (dim(&tokens[1]), dim(&tokens[2])) {
        (Some(w), Some(h)) => (w, h),
        _ => return Err(format_err(path, "bad PFM dimensions")),
    };
    let scale: f64 = tokens[3]
        .parse()
        .ok()
        .filter(|s: &f64| *s != 0.0 && s.is_finite())
        .ok_or_else(|| format_err(path, "bad PFM scale"))?;
    let little = scale < 0.0;
    let n = width * height * channels;
    let body = &bytes[start..];
    if body.len() != n * 4 {
        return Err(format_err(path, format!("PFM body has {} bytes, expected {}", body.len(), n * 4)));
    }
    let row = width * channels;
    let mut data = vec![0f32; n];
    for (k, chunk) in body.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (y_file, x) = (k / row, k % row);
        data[(height - 1 - y_file) * row + x] = v;
    }
    Ok(PfmImage { width, height, channels, data })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    w.write_all(bytes).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

fn read_pfm(path: &Path, channels: usize) -> Result<PfmImage> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let img = decode_pfm(&bytes, path)?;
    if img.channels != channels {
        return Err(format_err(path, format!("expected {channels} channel(s), found {}", img.channels)));
    }
    Ok(img)
}

pub fn write_depth_pfm(path: &Path, depth: &DepthMap) -> Result<()> {
    let data: Vec<f32> = depth
        .values()
        .iter()
        .zip(depth.valid_mask())
        .map(|(&d, &ok)| if ok { d as f32 } else { 0.0 })
        .collect();
    write_file(path, &encode_pfm(depth.width(), depth.height(), 1, &data))
}

pub fn read_depth_pfm(path: &Path) -> Result<DepthMap> {
    let img = read_pfm(path, 1)?;
    let valid: Vec<bool> = img.data.iter().map(|v| v.is_finite() && *v > 0.0).collect();
    let values = img.data.iter().zip(&valid).map(|(&v, &ok)| if ok { v as f64 } else { 0.0 }).collect();
    Ok(DepthMap::with_mask(img.width, img.height, values, valid)?)
}

pub fn write_latent_pfm(path: &Path, latent: &LatentGrid) -> Result<()> {
    let data: Vec<f32> = latent.values().iter().map(|&v| v as f32).collect();
    write_file(path, &encode_pfm(latent.width(), latent.height(), 1, &data))
}

pub fn read_latent_pfm(path: &Path) -> Result<LatentGrid> {
    let img = read_pfm(path, 1)?;
    Ok(LatentGrid::new(img.width, img.height, img.data.iter().map(|&v| v as f64).collect())?)
}

pub fn write_rgb_pfm(path: &Path, image: &ImageRGB) -> Result<()> {
    let data: Vec<f32> = image.pixels().iter().flat_map(|p| p.map(|c| c as f32)).collect();
    write_file(path, &encode_pfm(image.width(), image.height(), 3, &data))
}

pub fn read_rgb_pfm(path: &Path) -> Result<ImageRGB> {
    let img = read_pfm(path, 3)?;
    let px = img.data.chunks_exact(3).map(|c| [c[0] as f64, c[1] as f64, c[2] as f64]).collect();
    Ok(ImageRGB::new(img.width, img.height, px)?)
}

/// Depth to PGM counts: `0` for invalid, otherwise rounded and clamped to `1..=65535`.
pub fn depth_to_counts(d: f64, valid: bool) -> u16 {
    if !valid {
        return 0;
    }
    (d * PGM_COUNTS_PER_METER).round().clamp(1.0, 65535.0) as u16
}

pub fn encode_pgm16(depth: &DepthMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", depth.width(), depth.height()).into_bytes();
    out.reserve(depth.len() * 2);
    for (&d, &ok) in depth.values().iter().zip(depth.valid_mask()) {
        out.extend_from_slice(&depth_to_counts(d, ok).to_be_bytes());
    }
    out
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<DepthMap> {
    let (tokens, start) = header_tokens(bytes, 4).ok_or_else(|| format_err(path, "truncated PGM header"))?;
    if tokens[0] != "P5" {
        return Err(format_err(path, format!("not a binary PGM (magic {:?})", tokens[0])));
    }
    let num = |s: &str| s.parse::<usize>().ok().filter(|&v| v > 0);
    let (w, h, maxval) = match (num(&tokens[1]), num(&tokens[2]), num(&tokens[3])) {
        (Some(w), Some(h), Some(m)) if m <= 65535 => (w, h, m),
        _ => return Err(format_err(path, "bad PGM header values")),
    };
    let wide = maxval > 255;
    let body = &bytes[start..];
    let bpp = if wide { 2 } else { 1 };
    if body.len() != w * h * bpp {
        return Err(format_err(path, format!("PGM body has {} bytes, expected {}", body.len(), w * h * bpp)));
    }
    let counts: Vec<u16> = if wide {
        body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    } else {
        body.iter().map(|&b| b as u16).collect()
    };
    let valid: Vec<bool> = counts.iter().map(|&c| c > 0).collect();
    let values = counts.iter().map(|&c| c as f64 / PGM_COUNTS_PER_METER).collect();
    Ok(DepthMap::with_mask(w, h, values, valid)?)
}

pub fn write_depth_pgm(path: &Path, depth: &DepthMap) -> Result<()> {
    write_file(path, &encode_pgm16(depth))
}

pub fn read_depth_pgm(path: &Path) -> Result<DepthMap> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_pgm(&bytes, path)
}
