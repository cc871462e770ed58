//! Per-view rasters: metric depth maps with validity masks and RGB images.
//!
//! Bilinear sampling uses pixel centers at integer coordinates; a sample is
//! in bounds only when all four neighbor pixels exist (and, for depth maps,
//! are valid). Out-of-footprint samples are reported, not clamped.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

#[allow(unused_imports)] // shadowed by inherent f64 methods when std is in the build graph
use crate::scalar::FloatExt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RasterError {
    DimensionMismatch,
    /// Non-finite or out-of-range sample data.
    InvalidData,
}

impl fmt::Display for RasterError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RasterError::DimensionMismatch => f.write_str("raster dimensions do not match"),
            RasterError::InvalidData => f.write_str("raster holds invalid sample data"),
        }
    }
}

/// Value and spatial derivatives of a bilinear sample, plus the four
/// contributing pixels with their interpolation weights.
#[derive(Debug, Clone, Copy)]
pub struct Bilinear {
    pub value: f64,
    /// d value / d x at the sample point (per pixel).
    pub ddx: f64,
    /// d value / d y at the sample point (per pixel).
    pub ddy: f64,
    /// (flat pixel index, weight) of the four neighbors.
    pub taps: [(usize, f64); 4],
}

#[derive(Debug, Clone, Copy)]
struct Footprint {
    x0: usize,
    y0: usize,
    fx: f64,
    fy: f64,
}

fn footprint(width: usize, height: usize, at: [f64; 2]) -> Option<Footprint> {
    let (x, y) = (at[0], at[1]);
    if !(x >= 0.0 && y >= 0.0) {
        return None;
    }
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    if x0 + 1 >= width || y0 + 1 >= height {
        return None;
    }
    Some(Footprint {
        x0,
        y0,
        fx: x - x0 as f64,
        fy: y - y0 as f64,
    })
}

fn interp(fp: &Footprint, width: usize, v00: f64, v10: f64, v01: f64, v11: f64) -> Bilinear {
    let (fx, fy) = (fp.fx, fp.fy);
    let i00 = fp.y0 * width + fp.x0;
    Bilinear {
        value: (1.0 - fy) * ((1.0 - fx) * v00 + fx * v10) + fy * ((1.0 - fx) * v01 + fx * v11),
        ddx: (1.0 - fy) * (v10 - v00) + fy * (v11 - v01),
        ddy: (1.0 - fx) * (v01 - v00) + fx * (v11 - v10),
        taps: [
            (i00, (1.0 - fx) * (1.0 - fy)),
            (i00 + 1, fx * (1.0 - fy)),
            (i00 + width, (1.0 - fx) * fy),
            (i00 + width + 1, fx * fy),
        ],
    }
}

/// Metric depth raster with a per-pixel validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    /// Row-major depths in meters; meaningful only where `valid`.
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    /// All-invalid map.
    pub fn new(width: usize, height: usize) -> DepthMap {
        DepthMap {
            width,
            height,
            values: vec![0.0; width * height],
            valid: vec![false; width * height],
        }
    }

    pub fn from_parts(
        width: usize,
        height: usize,
        values: Vec<f64>,
        valid: Vec<bool>,
    ) -> Result<DepthMap, RasterError> {
        if values.len() != width * height || valid.len() != width * height {
            return Err(RasterError::DimensionMismatch);
        }
        for (v, ok) in values.iter().zip(&valid) {
            if *ok && !(v.is_finite() && *v > 0.0) {
                return Err(RasterError::InvalidData);
            }
        }
        Ok(DepthMap { width, height, values, valid })
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn set(&mut self, x: usize, y: usize, depth: f64) {
        let i = self.idx(x, y);
        self.values[i] = depth;
        self.valid[i] = true;
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Bilinear depth sample; `None` when the footprint leaves the raster or
    /// touches an invalid pixel.
    pub fn sample(&self, at: [f64; 2]) -> Option<Bilinear> {
        let fp = footprint(self.width, self.height, at)?;
        let i00 = fp.y0 * self.width + fp.x0;
        let (i10, i01, i11) = (i00 + 1, i00 + self.width, i00 + self.width + 1);
        if !(self.valid[i00] && self.valid[i10] && self.valid[i01] && self.valid[i11]) {
            return None;
        }
        Some(interp(
            &fp,
            self.width,
            self.values[i00],
            self.values[i10],
            self.values[i01],
            self.values[i11],
        ))
    }
}

/// RGB raster with channel values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major, 3 floats per pixel.
    pub values: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> RgbImage {
        RgbImage {
            width,
            height,
            values: vec![0.0; width * height * 3],
        }
    }

    pub fn from_parts(width: usize, height: usize, values: Vec<f64>) -> Result<RgbImage, RasterError> {
        if values.len() != width * height * 3 {
            return Err(RasterError::DimensionMismatch);
        }
        if values.iter().any(|v| !(*v >= 0.0 && *v <= 1.0)) {
            return Err(RasterError::InvalidData);
        }
        Ok(RgbImage { width, height, values })
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.values[i], self.values[i + 1], self.values[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.values[i..i + 3].copy_from_slice(&rgb);
    }

    /// Bilinear sample of one channel; `None` when out of bounds.
    pub fn sample_channel(&self, channel: usize, at: [f64; 2]) -> Option<Bilinear> {
        let fp = footprint(self.width, self.height, at)?;
        let at3 = |x: usize, y: usize| self.values[(y * self.width + x) * 3 + channel];
        Some(interp(
            &fp,
            self.width,
            at3(fp.x0, fp.y0),
            at3(fp.x0 + 1, fp.y0),
            at3(fp.x0, fp.y0 + 1),
            at3(fp.x0 + 1, fp.y0 + 1),
        ))
    }
}
