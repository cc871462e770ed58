//! Raster file IO: PFM depth maps, PGM validity masks, PPM images.
//!
//! Depths are stored as grayscale PFM (`Pf`, little-endian, rows bottom to
//! top per the format's negative-scale convention). Validity masks are
//! binary P5 PGM (255 = valid). Images are 16-bit P6 PPM, which keeps the
//! quantization step (1/65535) well below the photometric tolerances.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use mvgc_core::raster::{DepthMap, RgbImage};

/// Writes a depth map's values as grayscale PFM. Invalid pixels are written
/// as 0.0; the validity mask travels in a sibling PGM file.
pub fn write_pfm(path: &Path, depth: &DepthMap) -> Result<()> {
    let mut out = Vec::with_capacity(32 + depth.values.len() * 4);
    write!(out, "Pf\n{} {}\n-1.0\n", depth.width, depth.height)?;
    // Negative scale means little-endian; rows run bottom to top.
    for y in (0..depth.height).rev() {
        for x in 0..depth.width {
            let i = y * depth.width + x;
            let v = if depth.valid[i] { depth.values[i] as f32 } else { 0.0 };
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

/// Writes the validity mask as binary PGM, 255 = valid.
pub fn write_mask_pgm(path: &Path, depth: &DepthMap) -> Result<()> {
    let mut out = Vec::with_capacity(32 + depth.valid.len());
    write!(out, "P5\n{} {}\n255\n", depth.width, depth.height)?;
    out.extend(depth.valid.iter().map(|ok| if *ok { 255u8 } else { 0 }));
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

/// Writes an RGB image as 16-bit binary PPM (big-endian samples).
pub fn write_ppm(path: &Path, image: &RgbImage) -> Result<()> {
    let mut out = Vec::with_capacity(32 + image.values.len() * 2);
    write!(out, "P6\n{} {}\n65535\n", image.width, image.height)?;
    for v in &image.values {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

struct Header {
    width: usize,
    height: usize,
    scale: f64,
    data_at: usize,
}

/// Parses a Netpbm-style header: magic, then `fields` whitespace-separated
/// tokens (comments not supported), then one whitespace byte before data.
fn parse_header(bytes: &[u8], magic: &str, fields: usize) -> Result<(Vec<f64>, usize)> {
    if !bytes.starts_with(magic.as_bytes()) {
        bail!("bad magic, expected {magic}");
    }
    let mut pos = magic.len();
    let mut vals = Vec::with_capacity(fields);
    for _ in 0..fields {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let tok = std::str::from_utf8(&bytes[start..pos]).context("header not utf-8")?;
        vals.push(tok.parse::<f64>().with_context(|| format!("bad header token {tok:?}"))?);
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        bail!("truncated header");
    }
    Ok((vals, pos + 1))
}

fn read_header(bytes: &[u8], magic: &str) -> Result<Header> {
    let (vals, data_at) = parse_header(bytes, magic, 3)?;
    let (width, height) = (vals[0] as usize, vals[1] as usize);
    if width == 0 || height == 0 {
        bail!("degenerate raster size");
    }
    Ok(Header { width, height, scale: vals[2], data_at })
}

/// Reads a grayscale PFM together with its sibling PGM validity mask.
pub fn read_pfm_with_mask(pfm_path: &Path, mask_path: &Path) -> Result<DepthMap> {
    let bytes = fs::read(pfm_path).with_context(|| format!("reading {}", pfm_path.display()))?;
    let h = read_header(&bytes, "Pf")?;
    if h.scale >= 0.0 {
        bail!("only little-endian (negative scale) PFM is supported");
    }
    let n = h.width * h.height;
    let data = &bytes[h.data_at..];
    if data.len() < n * 4 {
        bail!("PFM data truncated");
    }
    let mut values = vec![0.0f64; n];
    for y in 0..h.height {
        for x in 0..h.width {
            let src = ((h.height - 1 - y) * h.width + x) * 4;
            let v = f32::from_le_bytes(data[src..src + 4].try_into().unwrap());
            values[y * h.width + x] = v as f64;
        }
    }
    let valid = read_mask_pgm(mask_path, h.width, h.height)?;
    // Clear stored placeholder values on invalid pixels so construction
    // invariants (positive finite depth where valid) are checked honestly.
    DepthMap::from_parts(h.width, h.height, values, valid)
        .map_err(|e| anyhow::anyhow!("{}: {e}", pfm_path.display()))
}

fn read_mask_pgm(path: &Path, width: usize, height: usize) -> Result<Vec<bool>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let h = read_header(&bytes, "P5")?;
    if (h.width, h.height) != (width, height) {
        bail!("mask size does not match depth size");
    }
    let n = width * height;
    let data = &bytes[h.data_at..];
    if data.len() < n {
        bail!("PGM data truncated");
    }
    Ok(data[..n].iter().map(|b| *b != 0).collect())
}

/// Reads a 16-bit binary PPM image into [0, 1] floats.
pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let h = read_header(&bytes, "P6")?;
    if h.scale as usize != 65535 {
        bail!("only 16-bit PPM is supported");
    }
    let n = h.width * h.height * 3;
    let data = &bytes[h.data_at..];
    if data.len() < n * 2 {
        bail!("PPM data truncated");
    }
    let values = (0..n)
        .map(|i| u16::from_be_bytes(data[i * 2..i * 2 + 2].try_into().unwrap()) as f64 / 65535.0)
        .collect();
    RgbImage::from_parts(h.width, h.height, values)
        .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
}
