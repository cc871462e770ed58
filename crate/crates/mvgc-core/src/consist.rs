//! Cross-view consistency objectives over a rig: depth-overlap loss,
//! SSIM-based photometric loss, their analytic gradients with respect to the
//! source depths, and a finite-difference validator.
//!
//! Both losses run over ordered (source, target) view pairs. Each source
//! pixel with valid depth is warped into the target view; the overlap term
//! compares the warped depth against a bilinear sample of the target depth
//! map, the photometric term compares source pixel colors against bilinear
//! samples of the target image under a windowed structural similarity score.
//! Global values are count-weighted means over all pairs, so every
//! correspondence carries equal weight.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camgeom::{relative_transform, CameraRig, CameraView};
use crate::geom::{RigidTransform, Vec3};
use crate::raster::{DepthMap, RgbImage};
#[allow(unused_imports)] // shadowed by inherent f64 methods when std is in the build graph
use crate::scalar::FloatExt;
use crate::warp::{posed_view, warp_depth, CorrespondenceField};

pub use crate::warp::PairKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConsistError {
    /// Raster sizes disagree with the rig, or frame/view indices are out of
    /// range.
    DimensionMismatch,
    /// No valid correspondence anywhere; a mean would be undefined.
    NoSamples,
    /// Negative weights, all-zero weights, or a bad SSIM window.
    InvalidConfig,
}

impl fmt::Display for ConsistError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ConsistError::DimensionMismatch => "rasters do not match the rig layout",
            ConsistError::NoSamples => "no valid correspondences to average over",
            ConsistError::InvalidConfig => "invalid loss weights or SSIM parameters",
        };
        f.write_str(s)
    }
}

/// Structural-similarity parameters. The window is a square of odd side
/// length; stabilizers follow the standard `(k L)^2` form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        // Dynamic range L = 1 for [0, 1] channels.
        SsimParams { window: 3, c1: 0.01 * 0.01, c2: 0.03 * 0.03 }
    }
}

impl SsimParams {
    pub fn validate(&self) -> Result<(), ConsistError> {
        if self.window >= 3 && self.window % 2 == 1 && self.c1 > 0.0 && self.c2 > 0.0 {
            Ok(())
        } else {
            Err(ConsistError::InvalidConfig)
        }
    }
}

/// Non-negative combination weights for the total objective; at least one
/// must be positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_det: f64,
    pub lambda_ov: f64,
    pub lambda_p: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_det: 1.0, lambda_ov: 1.0, lambda_p: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), ConsistError> {
        let ws = [self.lambda_det, self.lambda_ov, self.lambda_p];
        if ws.iter().all(|w| w.is_finite() && *w >= 0.0) && ws.iter().any(|w| *w > 0.0) {
            Ok(())
        } else {
            Err(ConsistError::InvalidConfig)
        }
    }
}

/// Per-pair loss terms; `l_ov`/`l_p` are means over this pair's own samples.
#[derive(Debug, Clone, PartialEq)]
pub struct PairLoss {
    pub key: PairKey,
    pub l_ov: f64,
    pub ov_count: usize,
    pub l_p: f64,
    pub p_count: usize,
}

/// Aggregated objective. `l_ov` and `l_p` are count-weighted means over all
/// pairs; `l_total` is the weighted sum with the detection term.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub l_det: f64,
    pub l_ov: f64,
    pub l_p: f64,
    pub l_total: f64,
    pub total_ov_count: usize,
    pub total_p_count: usize,
    pub per_pair: Vec<PairLoss>,
}

/// Mean absolute difference between the warped source depth and the target
/// depth sampled at the corresponding subpixel location. Counts only masked
/// pixels whose target sample has full valid support.
pub fn overlap_depth_loss(
    field: &CorrespondenceField,
    depth_dst: &DepthMap,
) -> Result<(f64, usize), ConsistError> {
    if depth_dst.width != field.target_width || depth_dst.height != field.target_height {
        return Err(ConsistError::DimensionMismatch);
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..field.mask.len() {
        if !field.mask[i] {
            continue;
        }
        if let Some(s) = depth_dst.sample(field.target_px[i]) {
            sum += (s.value - field.warped_depth[i]).abs();
            count += 1;
        }
    }
    Ok((if count > 0 { sum / count as f64 } else { 0.0 }, count))
}

/// SSIM of two equal-length windows; population statistics.
fn ssim_window(a: &[f64], b: &[f64], p: &SsimParams) -> f64 {
    let n = a.len() as f64;
    let mu_a = a.iter().sum::<f64>() / n;
    let mu_b = b.iter().sum::<f64>() / n;
    let var_a = a.iter().map(|v| v * v).sum::<f64>() / n - mu_a * mu_a;
    let var_b = b.iter().map(|v| v * v).sum::<f64>() / n - mu_b * mu_b;
    let cov = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / n - mu_a * mu_b;
    let lum = (2.0 * mu_a * mu_b + p.c1) / (mu_a * mu_a + mu_b * mu_b + p.c1);
    let st = (2.0 * cov + p.c2) / (var_a + var_b + p.c2);
    lum * st
}

/// Per-source-pixel photometric sample state for one pair.
struct PhotoField {
    /// True where the pixel is masked and all channels of the target image
    /// sample in bounds.
    ok: Vec<bool>,
    /// Target image samples, 3 per pixel (value only).
    b: Vec<[f64; 3]>,
}

fn photo_samples(field: &CorrespondenceField, img_dst: &RgbImage) -> PhotoField {
    let n = field.mask.len();
    let mut ok = vec![false; n];
    let mut b = vec![[0.0; 3]; n];
    for i in 0..n {
        if !field.mask[i] {
            continue;
        }
        let at = field.target_px[i];
        if let (Some(r), Some(g), Some(bl)) = (
            img_dst.sample_channel(0, at),
            img_dst.sample_channel(1, at),
            img_dst.sample_channel(2, at),
        ) {
            ok[i] = true;
            b[i] = [r.value, g.value, bl.value];
        }
    }
    PhotoField { ok, b }
}

/// Photometric dissimilarity `(1 - SSIM) / 2`, averaged over channels and
/// over every window position with full valid support. The first window
/// operand is the source image at its own pixels; the second is the target
/// image bilinearly sampled at the warped coordinates.
pub fn photometric_loss(
    field: &CorrespondenceField,
    img_src: &RgbImage,
    img_dst: &RgbImage,
    params: &SsimParams,
) -> Result<(f64, usize), ConsistError> {
    params.validate()?;
    if img_src.width != field.width
        || img_src.height != field.height
        || img_dst.width != field.target_width
        || img_dst.height != field.target_height
    {
        return Err(ConsistError::DimensionMismatch);
    }
    let pf = photo_samples(field, img_dst);
    let (sum, count) = photometric_sum(field, img_src, &pf, params);
    Ok((if count > 0 { sum / count as f64 } else { 0.0 }, count))
}

/// Sum of per-window dissimilarities and the window count.
fn photometric_sum(
    field: &CorrespondenceField,
    img_src: &RgbImage,
    pf: &PhotoField,
    params: &SsimParams,
) -> (f64, usize) {
    let half = params.window / 2;
    let wlen = params.window * params.window;
    let (w, h) = (field.width, field.height);
    let mut a_buf = vec![0.0; wlen];
    let mut b_buf = vec![0.0; wlen];
    let mut sum = 0.0;
    let mut count = 0usize;
    for cy in half..h.saturating_sub(half) {
        'center: for cx in half..w.saturating_sub(half) {
            let mut k = 0;
            for wy in cy - half..=cy + half {
                for wx in cx - half..=cx + half {
                    let i = wy * w + wx;
                    if !pf.ok[i] {
                        continue 'center;
                    }
                    b_buf[k] = 0.0; // filled per channel below
                    a_buf[k] = 0.0;
                    k += 1;
                }
            }
            let mut pe = 0.0;
            for c in 0..3 {
                let mut k = 0;
                for wy in cy - half..=cy + half {
                    for wx in cx - half..=cx + half {
                        let i = wy * w + wx;
                        a_buf[k] = img_src.pixel(wx, wy)[c];
                        b_buf[k] = pf.b[i][c];
                        k += 1;
                    }
                }
                pe += (1.0 - ssim_window(&a_buf, &b_buf, params)) / 2.0;
            }
            sum += pe / 3.0;
            count += 1;
        }
    }
    (sum, count)
}

/// Combines per-pair losses into the weighted total. Aggregation is
/// count-weighted so the global means equal a flat mean over all samples.
pub fn total_loss(
    l_det: f64,
    per_pair: Vec<PairLoss>,
    weights: &LossWeights,
) -> Result<LossReport, ConsistError> {
    weights.validate()?;
    let mut ov_sum = 0.0;
    let mut ov_n = 0usize;
    let mut p_sum = 0.0;
    let mut p_n = 0usize;
    for p in &per_pair {
        ov_sum += p.l_ov * p.ov_count as f64;
        ov_n += p.ov_count;
        p_sum += p.l_p * p.p_count as f64;
        p_n += p.p_count;
    }
    let l_ov = if ov_n > 0 { ov_sum / ov_n as f64 } else { 0.0 };
    let l_p = if p_n > 0 { p_sum / p_n as f64 } else { 0.0 };
    Ok(LossReport {
        l_det,
        l_ov,
        l_p,
        l_total: weights.lambda_det * l_det + weights.lambda_ov * l_ov + weights.lambda_p * l_p,
        total_ov_count: ov_n,
        total_p_count: p_n,
        per_pair,
    })
}

fn check_layout(
    rig: &CameraRig,
    ego: &[RigidTransform],
    depths: &[Vec<DepthMap>],
    images: &[Vec<RgbImage>],
    pairs: &[PairKey],
) -> Result<(), ConsistError> {
    let nv = rig.views().len();
    let nf = ego.len();
    if depths.len() != nf || images.len() != nf {
        return Err(ConsistError::DimensionMismatch);
    }
    for f in 0..nf {
        if depths[f].len() != nv || images[f].len() != nv {
            return Err(ConsistError::DimensionMismatch);
        }
        for (v, view) in rig.views().iter().enumerate() {
            let k = &view.intrinsics;
            if depths[f][v].width != k.width
                || depths[f][v].height != k.height
                || images[f][v].width != k.width
                || images[f][v].height != k.height
            {
                return Err(ConsistError::DimensionMismatch);
            }
        }
    }
    for p in pairs {
        if p.src_view >= nv || p.dst_view >= nv || p.src_frame >= nf || p.dst_frame >= nf {
            return Err(ConsistError::DimensionMismatch);
        }
    }
    Ok(())
}

fn pair_views(rig: &CameraRig, ego: &[RigidTransform], key: &PairKey) -> (CameraView, CameraView) {
    (
        posed_view(&rig.views()[key.src_view], &ego[key.src_frame]),
        posed_view(&rig.views()[key.dst_view], &ego[key.dst_frame]),
    )
}

/// Evaluates both consistency terms over the given pairs and combines them
/// with an externally supplied detection loss value.
///
/// `depths` and `images` are indexed `[frame][view]`, matching the rig's
/// view order and the ego pose list.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_scene(
    rig: &CameraRig,
    ego: &[RigidTransform],
    depths: &[Vec<DepthMap>],
    images: &[Vec<RgbImage>],
    pairs: &[PairKey],
    weights: &LossWeights,
    ssim: &SsimParams,
    l_det: f64,
) -> Result<LossReport, ConsistError> {
    weights.validate()?;
    ssim.validate()?;
    check_layout(rig, ego, depths, images, pairs)?;
    let mut per_pair = Vec::with_capacity(pairs.len());
    for key in pairs {
        let (src, dst) = pair_views(rig, ego, key);
        let field = warp_depth(&src, &dst, &depths[key.src_frame][key.src_view])
            .map_err(|_| ConsistError::DimensionMismatch)?;
        let (l_ov, ov_count) = overlap_depth_loss(&field, &depths[key.dst_frame][key.dst_view])?;
        let (l_p, p_count) = photometric_loss(
            &field,
            &images[key.src_frame][key.src_view],
            &images[key.dst_frame][key.dst_view],
            ssim,
        )?;
        per_pair.push(PairLoss { key: *key, l_ov, ov_count, l_p, p_count });
    }
    total_loss(l_det, per_pair, weights)
}

/// Gradient of the weighted consistency objective with respect to one
/// view/frame's depth values, flat row-major layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GradField {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

/// Derivative of the warped target pixel (u, v) and warped depth with
/// respect to the source depth at one pixel.
#[derive(Debug, Clone, Copy)]
struct WarpJet {
    du_dd: f64,
    dv_dd: f64,
    /// d(warped depth)/d(source depth): the z component of the rotated ray.
    dz_dd: f64,
}

fn warp_jets(src: &CameraView, dst: &CameraView, field: &CorrespondenceField) -> Vec<WarpJet> {
    let n = field.mask.len();
    let mut jets = vec![WarpJet { du_dd: 0.0, dv_dd: 0.0, dz_dd: 1.0 }; n];
    let identity = src.intrinsics == dst.intrinsics && src.extrinsics == dst.extrinsics;
    if identity {
        // The correspondence is the pixel grid: moving the depth changes the
        // warped depth one-to-one and the target pixel not at all.
        return jets;
    }
    let rel = relative_transform(src, dst);
    let t = rel.translation();
    let kd = &dst.intrinsics;
    for y in 0..field.height {
        for x in 0..field.width {
            let i = y * field.width + x;
            if !field.mask[i] {
                continue;
            }
            let ray = crate::camgeom::pixel_ray(src, [x as f64, y as f64]);
            let a: Vec3 = rel.rotate(ray);
            let z = field.warped_depth[i];
            // u = fx (d a_x + t_x) / (d a_z + t_z) + cx; the numerator of
            // du/dd telescopes to a constant.
            jets[i] = WarpJet {
                du_dd: kd.fx * (a.x * t.z - a.z * t.x) / (z * z),
                dv_dd: kd.fy * (a.y * t.z - a.z * t.y) / (z * z),
                dz_dd: a.z,
            };
        }
    }
    jets
}

/// Everything the backward pass needs, computed once per pair.
struct PairForward {
    field: CorrespondenceField,
    jets: Vec<WarpJet>,
    photo: PhotoField,
}

fn pair_forward(
    rig: &CameraRig,
    ego: &[RigidTransform],
    depths: &[Vec<DepthMap>],
    images: &[Vec<RgbImage>],
    key: &PairKey,
) -> Result<PairForward, ConsistError> {
    let (src, dst) = pair_views(rig, ego, key);
    let field = warp_depth(&src, &dst, &depths[key.src_frame][key.src_view])
        .map_err(|_| ConsistError::DimensionMismatch)?;
    let jets = warp_jets(&src, &dst, &field);
    let photo = photo_samples(&field, &images[key.dst_frame][key.dst_view]);
    Ok(PairForward { field, jets, photo })
}

/// Analytic gradient of `lambda_ov * l_ov + lambda_p * l_p` with respect to
/// every depth value, indexed `[frame][view]`. The detection term does not
/// depend on depth. Gradients flow into source depths (through the warp and
/// the resampling coordinates) and into target depths (through the bilinear
/// taps of the overlap term); the photometric term touches source depths
/// only.
#[allow(clippy::too_many_arguments)]
pub fn scene_gradient(
    rig: &CameraRig,
    ego: &[RigidTransform],
    depths: &[Vec<DepthMap>],
    images: &[Vec<RgbImage>],
    pairs: &[PairKey],
    weights: &LossWeights,
    ssim: &SsimParams,
) -> Result<Vec<Vec<GradField>>, ConsistError> {
    weights.validate()?;
    ssim.validate()?;
    check_layout(rig, ego, depths, images, pairs)?;

    let mut grads: Vec<Vec<GradField>> = depths
        .iter()
        .map(|frame| {
            frame
                .iter()
                .map(|d| GradField {
                    width: d.width,
                    height: d.height,
                    values: vec![0.0; d.values.len()],
                })
                .collect()
        })
        .collect();

    // First pass: global sample counts fix the normalization.
    let mut forwards = Vec::with_capacity(pairs.len());
    let mut ov_total = 0usize;
    let mut p_total = 0usize;
    for key in pairs {
        let fwd = pair_forward(rig, ego, depths, images, key)?;
        let depth_dst = &depths[key.dst_frame][key.dst_view];
        for i in 0..fwd.field.mask.len() {
            if fwd.field.mask[i] && depth_dst.sample(fwd.field.target_px[i]).is_some() {
                ov_total += 1;
            }
        }
        let (_, pc) = photometric_sum(
            &fwd.field,
            &images[key.src_frame][key.src_view],
            &fwd.photo,
            ssim,
        );
        p_total += pc;
        forwards.push(fwd);
    }
    if ov_total == 0 && p_total == 0 {
        return Err(ConsistError::NoSamples);
    }

    for (key, fwd) in pairs.iter().zip(&forwards) {
        if weights.lambda_ov > 0.0 && ov_total > 0 {
            accumulate_overlap_grad(
                key,
                fwd,
                &depths[key.dst_frame][key.dst_view],
                weights.lambda_ov / ov_total as f64,
                &mut grads,
            );
        }
        if weights.lambda_p > 0.0 && p_total > 0 {
            accumulate_photo_grad(
                key,
                fwd,
                &images[key.src_frame][key.src_view],
                &images[key.dst_frame][key.dst_view],
                ssim,
                weights.lambda_p / p_total as f64,
                &mut grads,
            );
        }
    }
    Ok(grads)
}

fn accumulate_overlap_grad(
    key: &PairKey,
    fwd: &PairForward,
    depth_dst: &DepthMap,
    scale: f64,
    grads: &mut [Vec<GradField>],
) {
    for i in 0..fwd.field.mask.len() {
        if !fwd.field.mask[i] {
            continue;
        }
        let Some(s) = depth_dst.sample(fwd.field.target_px[i]) else {
            continue;
        };
        let r = s.value - fwd.field.warped_depth[i];
        let sign = if r > 0.0 {
            1.0
        } else if r < 0.0 {
            -1.0
        } else {
            0.0
        };
        let jet = fwd.jets[i];
        // Source depth moves both the sampling point and the warped depth.
        let d_src = sign * (s.ddx * jet.du_dd + s.ddy * jet.dv_dd - jet.dz_dd);
        grads[key.src_frame][key.src_view].values[i] += scale * d_src;
        // Target depth enters linearly through the bilinear taps.
        for (ti, wgt) in s.taps {
            grads[key.dst_frame][key.dst_view].values[ti] += scale * sign * wgt;
        }
    }
}

/// d(1 - SSIM)/2 with respect to each element of the second window operand.
fn ssim_grad_b(a: &[f64], b: &[f64], p: &SsimParams, out: &mut [f64]) {
    let n = a.len() as f64;
    let mu_a = a.iter().sum::<f64>() / n;
    let mu_b = b.iter().sum::<f64>() / n;
    let var_a = a.iter().map(|v| v * v).sum::<f64>() / n - mu_a * mu_a;
    let var_b = b.iter().map(|v| v * v).sum::<f64>() / n - mu_b * mu_b;
    let cov = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>() / n - mu_a * mu_b;
    let na = 2.0 * mu_a * mu_b + p.c1;
    let da = mu_a * mu_a + mu_b * mu_b + p.c1;
    let nb = 2.0 * cov + p.c2;
    let db = var_a + var_b + p.c2;
    let lum = na / da;
    let st = nb / db;
    for k in 0..a.len() {
        let dmu = 1.0 / n;
        let dvar = 2.0 * (b[k] - mu_b) / n;
        let dcov = (a[k] - mu_a) / n;
        let dlum = (2.0 * mu_a * da - na * 2.0 * mu_b) / (da * da) * dmu;
        let dst = (2.0 * dcov * db - nb * dvar) / (db * db);
        out[k] = -0.5 * (dlum * st + lum * dst);
    }
}

#[allow(clippy::too_many_arguments)]
fn accumulate_photo_grad(
    key: &PairKey,
    fwd: &PairForward,
    img_src: &RgbImage,
    img_dst: &RgbImage,
    params: &SsimParams,
    scale: f64,
    grads: &mut [Vec<GradField>],
) {
    let half = params.window / 2;
    let wlen = params.window * params.window;
    let (w, h) = (fwd.field.width, fwd.field.height);
    let mut a_buf = vec![0.0; wlen];
    let mut b_buf = vec![0.0; wlen];
    let mut g_buf = vec![0.0; wlen];
    let mut idx_buf = vec![0usize; wlen];
    // Per-channel chain factor d(b)/d(depth) for each source pixel that
    // appears in some valid window; computed lazily and cached.
    let n = fwd.field.mask.len();
    let mut db_dd = vec![[f64::NAN; 3]; n];
    let mut db_known = vec![false; n];

    for cy in half..h.saturating_sub(half) {
        'center: for cx in half..w.saturating_sub(half) {
            let mut k = 0;
            for wy in cy - half..=cy + half {
                for wx in cx - half..=cx + half {
                    let i = wy * w + wx;
                    if !fwd.photo.ok[i] {
                        continue 'center;
                    }
                    idx_buf[k] = i;
                    k += 1;
                }
            }
            for c in 0..3 {
                for (k, &i) in idx_buf.iter().enumerate() {
                    a_buf[k] = img_src.pixel(i % w, i / w)[c];
                    b_buf[k] = fwd.photo.b[i][c];
                }
                ssim_grad_b(&a_buf, &b_buf, params, &mut g_buf);
                for (k, &i) in idx_buf.iter().enumerate() {
                    if !db_known[i] {
                        let jet = fwd.jets[i];
                        let at = fwd.field.target_px[i];
                        let mut d = [0.0; 3];
                        for (cc, dcc) in d.iter_mut().enumerate() {
                            let s = img_dst
                                .sample_channel(cc, at)
                                .expect("photo.ok guarantees in-bounds sample");
                            *dcc = s.ddx * jet.du_dd + s.ddy * jet.dv_dd;
                        }
                        db_dd[i] = d;
                        db_known[i] = true;
                    }
                    // Mean over 3 channels inside the loss.
                    grads[key.src_frame][key.src_view].values[i] +=
                        scale * g_buf[k] * db_dd[i][c] / 3.0;
                }
            }
        }
    }
}

/// One sampled comparison of the finite-difference validator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdSample {
    pub frame: usize,
    pub view: usize,
    pub x: usize,
    pub y: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub samples: Vec<FdSample>,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdOptions {
    pub epsilon: f64,
    /// Number of depth pixels to probe.
    pub samples: usize,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions { epsilon: 1e-3, samples: 64, seed: 0 }
    }
}

/// Central-difference check of [`scene_gradient`] at randomly sampled depth
/// pixels.
///
/// The objective is piecewise smooth: it has kinks where a perturbation
/// crosses a bilinear cell boundary, flips the sign of a residual, or moves
/// a correspondence across the mask boundary. Sampled pixels whose `±epsilon`
/// perturbation straddles such a kink are skipped (counted in `skipped`);
/// everywhere else the derivative is exact up to truncation error.
#[allow(clippy::too_many_arguments)]
pub fn finite_difference_check(
    rig: &CameraRig,
    ego: &[RigidTransform],
    depths: &[Vec<DepthMap>],
    images: &[Vec<RgbImage>],
    pairs: &[PairKey],
    weights: &LossWeights,
    ssim: &SsimParams,
    opts: &FdOptions,
) -> Result<FdReport, ConsistError> {
    let grads = scene_gradient(rig, ego, depths, images, pairs, weights, ssim)?;
    let base = evaluate_scene(rig, ego, depths, images, pairs, weights, ssim, 0.0)?;
    if base.total_ov_count == 0 && base.total_p_count == 0 {
        return Err(ConsistError::NoSamples);
    }
    let caches = build_pair_caches(rig, ego, depths, images, pairs)?;

    // Candidate pool: valid depth pixels away from validity boundaries.
    let mut pool: Vec<(usize, usize, usize, usize)> = Vec::new();
    for (f, frame) in depths.iter().enumerate() {
        for (v, d) in frame.iter().enumerate() {
            for y in 1..d.height.saturating_sub(1) {
                for x in 1..d.width.saturating_sub(1) {
                    if neighborhood_valid(d, x, y) {
                        pool.push((f, v, x, y));
                    }
                }
            }
        }
    }
    if pool.is_empty() {
        return Err(ConsistError::NoSamples);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut samples = Vec::new();
    let mut skipped = 0usize;
    let mut tried = 0usize;
    let budget = opts.samples * 20;
    while samples.len() < opts.samples && tried < budget {
        tried += 1;
        let (f, v, x, y) = pool[rng.gen_range(0..pool.len())];
        if !fd_pixel_safe(&caches, depths, f, v, x, y, opts.epsilon) {
            skipped += 1;
            continue;
        }
        let i = y * depths[f][v].width + x;
        let analytic = grads[f][v].values[i];
        if analytic.abs() < 1e-7 {
            // Too small to compare against central-difference noise.
            skipped += 1;
            continue;
        }
        let numeric = fd_numeric(
            &caches, rig, ego, depths, images, weights, ssim, &base, f, v, x, y, opts.epsilon,
        )?;
        let denom = analytic.abs().max(numeric.abs()).max(1e-9);
        let rel_err = (analytic - numeric).abs() / denom;
        samples.push(FdSample { frame: f, view: v, x, y, analytic, numeric, rel_err });
    }
    if samples.is_empty() {
        return Err(ConsistError::NoSamples);
    }
    let max_rel_err = samples.iter().map(|s| s.rel_err).fold(0.0, f64::max);
    let mean_rel_err = samples.iter().map(|s| s.rel_err).sum::<f64>() / samples.len() as f64;
    Ok(FdReport { checked: samples.len(), samples, max_rel_err, mean_rel_err, skipped })
}

fn neighborhood_valid(d: &DepthMap, x: usize, y: usize) -> bool {
    for dy in -1i64..=1 {
        for dx in -1i64..=1 {
            let xx = (x as i64 + dx) as usize;
            let yy = (y as i64 + dy) as usize;
            if !d.valid[yy * d.width + xx] {
                return false;
            }
        }
    }
    true
}

/// Precomputed per-pair state of the finite-difference validator. A single
/// depth perturbation touches one warped sample (as source) or a handful of
/// bilinear taps (as target), so everything else can be computed once and
/// reused across all probed pixels.
struct PairCache {
    key: PairKey,
    field: CorrespondenceField,
    jets: Vec<WarpJet>,
    pf: PhotoField,
    /// For each target pixel, the masked source pixels whose overlap sample
    /// taps it.
    rev_taps: Vec<Vec<u32>>,
}

fn build_pair_caches(
    rig: &CameraRig,
    ego: &[RigidTransform],
    depths: &[Vec<DepthMap>],
    images: &[Vec<RgbImage>],
    pairs: &[PairKey],
) -> Result<Vec<PairCache>, ConsistError> {
    pairs
        .iter()
        .map(|key| {
            let (src, dst) = pair_views(rig, ego, key);
            let field = warp_depth(&src, &dst, &depths[key.src_frame][key.src_view])
                .map_err(|_| ConsistError::DimensionMismatch)?;
            let jets = warp_jets(&src, &dst, &field);
            let pf = photo_samples(&field, &images[key.dst_frame][key.dst_view]);
            let depth_dst = &depths[key.dst_frame][key.dst_view];
            let mut rev_taps = vec![Vec::new(); depth_dst.values.len()];
            for q in 0..field.mask.len() {
                if field.mask[q] {
                    if let Some(s) = depth_dst.sample(field.target_px[q]) {
                        for (ti, _) in s.taps {
                            rev_taps[ti].push(q as u32);
                        }
                    }
                }
            }
            Ok(PairCache { key: *key, field, jets, pf, rev_taps })
        })
        .collect()
}

/// Warp of a single source pixel at the given depth; mirrors [`warp_depth`].
fn warp_one(
    src: &CameraView,
    dst: &CameraView,
    x: usize,
    y: usize,
    depth: f64,
) -> Option<([f64; 2], f64)> {
    if src.intrinsics == dst.intrinsics && src.extrinsics == dst.extrinsics {
        return Some(([x as f64, y as f64], depth));
    }
    let rel = relative_transform(src, dst);
    let ray = crate::camgeom::pixel_ray(src, [x as f64, y as f64]);
    let moved = rel.apply(ray * depth);
    if moved.z <= crate::camgeom::DEPTH_EPS {
        return None;
    }
    let u = dst.intrinsics.fx * moved.x / moved.z + dst.intrinsics.cx;
    let v = dst.intrinsics.fy * moved.y / moved.z + dst.intrinsics.cy;
    if u >= 0.0
        && u < dst.intrinsics.width as f64
        && v >= 0.0
        && v < dst.intrinsics.height as f64
    {
        Some(([u, v], moved.z))
    } else {
        None
    }
}

/// Per-window dissimilarity as accumulated by [`photometric_sum`], with the
/// target sample at `i_over` overridden. `None` for windows without full
/// valid support.
fn window_pe_override(
    img_src: &RgbImage,
    pf: &PhotoField,
    params: &SsimParams,
    width: usize,
    cx: usize,
    cy: usize,
    i_over: usize,
    b_over: [f64; 3],
) -> Option<f64> {
    let half = params.window / 2;
    let wlen = params.window * params.window;
    let mut a_buf = vec![0.0; wlen];
    let mut b_buf = vec![0.0; wlen];
    for wy in cy - half..=cy + half {
        for wx in cx - half..=cx + half {
            if !pf.ok[wy * width + wx] {
                return None;
            }
        }
    }
    let mut pe = 0.0;
    for c in 0..3 {
        let mut k = 0;
        for wy in cy - half..=cy + half {
            for wx in cx - half..=cx + half {
                let i = wy * width + wx;
                a_buf[k] = img_src.pixel(wx, wy)[c];
                b_buf[k] = if i == i_over { b_over[c] } else { pf.b[i][c] };
                k += 1;
            }
        }
        pe += (1.0 - ssim_window(&a_buf, &b_buf, params)) / 2.0;
    }
    Some(pe / 3.0)
}

/// Rejects pixels whose perturbation crosses a non-smooth point of the
/// objective in any pair where the pixel acts as a source.
fn fd_pixel_safe(
    caches: &[PairCache],
    depths: &[Vec<DepthMap>],
    f: usize,
    v: usize,
    x: usize,
    y: usize,
    eps: f64,
) -> bool {
    for cache in caches {
        let key = &cache.key;
        if key.src_frame != f || key.src_view != v {
            continue;
        }
        let field = &cache.field;
        let i = y * field.width + x;
        if !field.mask[i] {
            // The pixel might enter the mask under perturbation only if its
            // projection sits right at the image border; conservatively
            // require it to be well outside or the depth ray degenerate.
            continue;
        }
        let jet = cache.jets[i];
        let move_u = jet.du_dd.abs() * eps;
        let move_v = jet.dv_dd.abs() * eps;
        let [u, vpx] = field.target_px[i];
        // Stay strictly inside the target raster's sampling region.
        if u - move_u < 1.0
            || u + move_u > field.target_width as f64 - 2.0
            || vpx - move_v < 1.0
            || vpx + move_v > field.target_height as f64 - 2.0
        {
            return false;
        }
        // Do not cross a bilinear cell boundary.
        let frac_u = u - u.floor();
        let frac_v = vpx - vpx.floor();
        let pad = 1e-9;
        if frac_u < move_u + pad
            || frac_u > 1.0 - move_u - pad
            || frac_v < move_v + pad
            || frac_v > 1.0 - move_v - pad
        {
            return false;
        }
        // Residual sign must be stable over the perturbation.
        let depth_dst = &depths[key.dst_frame][key.dst_view];
        if let Some(s) = depth_dst.sample(field.target_px[i]) {
            let r = s.value - field.warped_depth[i];
            let dr = (s.ddx.abs() * jet.du_dd.abs() + s.ddy.abs() * jet.dv_dd.abs()
                + jet.dz_dd.abs())
                * eps;
            if r.abs() < 2.0 * dr + 1e-9 {
                return false;
            }
        } else {
            // Sampleable under perturbation but not at the center: boundary.
            return false;
        }
        // The 4 target depth taps must sit inside a valid neighborhood so
        // the overlap count cannot change.
        let (tu, tv) = (u.floor() as usize, vpx.floor() as usize);
        for yy in tv.saturating_sub(1)..=(tv + 2).min(field.target_height - 1) {
            for xx in tu.saturating_sub(1)..=(tu + 2).min(field.target_width - 1) {
                if !depth_dst.valid[yy * depth_dst.width + xx] {
                    return false;
                }
            }
        }
    }
    true
}

/// Central difference of the weighted consistency objective, restricted to
/// the loss terms the perturbed pixel can reach (all others cancel in the
/// difference): as a source pixel it moves one warped sample and at most a
/// window-neighborhood of photometric windows; as a target pixel it shifts
/// the overlap residuals of the source pixels tapping it. Normalization
/// uses the unperturbed global counts, which the safety guard keeps fixed.
#[allow(clippy::too_many_arguments)]
fn fd_numeric(
    caches: &[PairCache],
    rig: &CameraRig,
    ego: &[RigidTransform],
    depths: &[Vec<DepthMap>],
    images: &[Vec<RgbImage>],
    weights: &LossWeights,
    ssim: &SsimParams,
    base: &LossReport,
    f: usize,
    v: usize,
    x: usize,
    y: usize,
    eps: f64,
) -> Result<f64, ConsistError> {
    let half = ssim.window / 2;
    let eval = |delta: f64| -> f64 {
        let i = y * depths[f][v].width + x;
        let mut ov_sum = 0.0;
        let mut p_sum = 0.0;
        for cache in caches {
            let key = &cache.key;
            let field = &cache.field;
            let depth_dst = &depths[key.dst_frame][key.dst_view];
            if key.src_frame == f && key.src_view == v && field.mask[i] {
                let (src, dst) = pair_views(rig, ego, key);
                if let Some((px, z)) = warp_one(&src, &dst, x, y, depths[f][v].values[i] + delta)
                {
                    if let Some(s) = depth_dst.sample(px) {
                        ov_sum += (s.value - z).abs();
                    }
                    let img_dst = &images[key.dst_frame][key.dst_view];
                    let img_src = &images[key.src_frame][key.src_view];
                    if let (Some(r), Some(g), Some(b)) = (
                        img_dst.sample_channel(0, px),
                        img_dst.sample_channel(1, px),
                        img_dst.sample_channel(2, px),
                    ) {
                        let b_over = [r.value, g.value, b.value];
                        for cy in y.saturating_sub(half)..=(y + half).min(field.height - 1 - half)
                        {
                            for cx in
                                x.saturating_sub(half)..=(x + half).min(field.width - 1 - half)
                            {
                                if cx < half || cy < half {
                                    continue;
                                }
                                if let Some(pe) = window_pe_override(
                                    img_src, &cache.pf, ssim, field.width, cx, cy, i, b_over,
                                ) {
                                    p_sum += pe;
                                }
                            }
                        }
                    }
                }
            }
            if key.dst_frame == f && key.dst_view == v {
                for q in &cache.rev_taps[i] {
                    let q = *q as usize;
                    let s = depth_dst
                        .sample(field.target_px[q])
                        .expect("reverse tap entries have sampleable correspondences");
                    let w = s
                        .taps
                        .iter()
                        .find(|(ti, _)| *ti == i)
                        .map(|(_, w)| *w)
                        .expect("reverse tap entry taps the pixel");
                    ov_sum += (s.value + delta * w - field.warped_depth[q]).abs();
                }
            }
        }
        let mut total = 0.0;
        if base.total_ov_count > 0 {
            total += weights.lambda_ov * ov_sum / base.total_ov_count as f64;
        }
        if base.total_p_count > 0 {
            total += weights.lambda_p * p_sum / base.total_p_count as f64;
        }
        total
    };
    Ok((eval(eps) - eval(-eps)) / (2.0 * eps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camgeom::{make_preset_rig, RigPreset};
    use crate::synthrig::{render_scene, split_bundles, SceneSpec};
    use crate::warp::enumerate_pairs;

    fn sphere_scene() -> (CameraRig, SceneSpec, Vec<Vec<DepthMap>>, Vec<Vec<RgbImage>>) {
        let rig = make_preset_rig(RigPreset::Nuscenes6);
        let spec = SceneSpec::sphere_room(42, 2);
        let bundles = render_scene(&rig, &spec).unwrap();
        let (depths, images) = split_bundles(&bundles);
        (rig, spec, depths, images)
    }

    #[test]
    fn identity_pair_offset_depth_closed_form() {
        // Source depth = target depth + delta over the whole raster: the
        // overlap loss is exactly delta and its gradient is +-1/N.
        let rig = make_preset_rig(RigPreset::Mono1);
        let view = &rig.views()[0];
        let (w, h) = (view.intrinsics.width, view.intrinsics.height);
        let delta = 0.25;
        let mut d_src = DepthMap::new(w, h);
        let mut d_dst = DepthMap::new(w, h);
        for y in 0..h {
            for x in 0..w {
                d_dst.set(x, y, 5.0);
                d_src.set(x, y, 5.0 + delta);
            }
        }
        let field = warp_depth(view, view, &d_src).unwrap();
        let (l, n) = overlap_depth_loss(&field, &d_dst).unwrap();
        assert_eq!(n, (w - 1) * (h - 1));
        assert!((l - delta).abs() < 1e-12);

        let ego = [RigidTransform::IDENTITY];
        let depths = alloc::vec![alloc::vec![d_src.clone()], alloc::vec![d_dst.clone()]];
        // Fold both views into one two-frame layout via temporal pairing of
        // a single view: frame 0 holds src, frame 1 holds dst.
        let pairs = [PairKey { src_view: 0, dst_view: 0, src_frame: 0, dst_frame: 1 }];
        let ego2 = [RigidTransform::IDENTITY, RigidTransform::IDENTITY];
        let img = RgbImage::new(w, h);
        let images = alloc::vec![alloc::vec![img.clone()], alloc::vec![img.clone()]];
        let weights = LossWeights { lambda_det: 0.0, lambda_ov: 1.0, lambda_p: 0.0 };
        let report = evaluate_scene(
            &rig,
            &ego2,
            &depths,
            &images,
            &pairs,
            &weights,
            &SsimParams::default(),
            0.0,
        )
        .unwrap();
        assert!((report.l_ov - delta).abs() < 1e-12);
        let _ = ego;

        let grads =
            scene_gradient(&rig, &ego2, &depths, &images, &pairs, &weights, &SsimParams::default())
                .unwrap();
        let nf = report.total_ov_count as f64;
        // Interior source pixel: gradient +1/N (loss grows as src depth
        // exceeds dst further); matching dst pixel: -1/N.
        let i = (h / 2) * w + w / 2;
        assert!((grads[0][0].values[i] - 1.0 / nf).abs() < 1e-15);
        assert!((grads[1][0].values[i] + 1.0 / nf).abs() < 1e-15);
    }

    #[test]
    fn constant_images_ssim_closed_form() {
        // Two constant images with values m1, m2: variance terms vanish, the
        // structure factor is c2/c2 = 1 and SSIM reduces to the luminance
        // ratio.
        let p = SsimParams::default();
        let (m1, m2) = (0.25, 0.75);
        let a = [m1; 9];
        let b = [m2; 9];
        let got = ssim_window(&a, &b, &p);
        let want = (2.0 * m1 * m2 + p.c1) / (m1 * m1 + m2 * m2 + p.c1);
        assert!((got - want).abs() < 1e-15);
        // Identical windows: SSIM 1, dissimilarity 0.
        assert!((ssim_window(&a, &a, &p) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn photometric_loss_constant_images_matches_formula() {
        let rig = make_preset_rig(RigPreset::Mono1);
        let view = &rig.views()[0];
        let (w, h) = (view.intrinsics.width, view.intrinsics.height);
        let mut depth = DepthMap::new(w, h);
        for y in 0..h {
            for x in 0..w {
                depth.set(x, y, 5.0);
            }
        }
        let field = warp_depth(view, view, &depth).unwrap();
        let p = SsimParams::default();
        let (m1, m2) = (0.2, 0.6);
        let src = RgbImage::from_parts(w, h, alloc::vec![m1; w * h * 3]).unwrap();
        let dst = RgbImage::from_parts(w, h, alloc::vec![m2; w * h * 3]).unwrap();
        let (l, n) = photometric_loss(&field, &src, &dst, &p).unwrap();
        assert!(n > 0);
        let ssim = (2.0 * m1 * m2 + p.c1) / (m1 * m1 + m2 * m2 + p.c1);
        assert!((l - (1.0 - ssim) / 2.0).abs() < 1e-12);
        // Identical images: zero loss.
        let (l0, _) = photometric_loss(&field, &src, &src, &p).unwrap();
        assert!(l0.abs() < 1e-15);
    }

    #[test]
    fn sphere_scene_losses_are_tiny() {
        let (rig, spec, depths, images) = sphere_scene();
        let pairs = enumerate_pairs(&rig, 2, 1);
        assert_eq!(pairs.len(), 36);
        let report = evaluate_scene(
            &rig,
            &spec.trajectory,
            &depths,
            &images,
            &pairs,
            &LossWeights::default(),
            &SsimParams::default(),
            0.0,
        )
        .unwrap();
        assert!(report.total_ov_count > 0);
        for p in &report.per_pair {
            assert!(p.ov_count > 0, "pair {:?} has no overlap", p.key);
            assert!(p.l_ov < 1e-3, "pair {:?} l_ov = {}", p.key, p.l_ov);
            assert!(p.l_p < 1e-2, "pair {:?} l_p = {}", p.key, p.l_p);
        }
    }

    #[test]
    fn loss_detects_corrupted_depth() {
        let (rig, spec, mut depths, images) = sphere_scene();
        let pairs = enumerate_pairs(&rig, 2, 1);
        let weights = LossWeights::default();
        let clean = evaluate_scene(
            &rig, &spec.trajectory, &depths, &images, &pairs, &weights,
            &SsimParams::default(), 0.0,
        )
        .unwrap();
        for v in depths[0][0].values.iter_mut() {
            *v *= 1.1;
        }
        let dirty = evaluate_scene(
            &rig, &spec.trajectory, &depths, &images, &pairs, &weights,
            &SsimParams::default(), 0.0,
        )
        .unwrap();
        assert!(dirty.l_ov > 10.0 * clean.l_ov);
        assert!(dirty.l_p > clean.l_p);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (rig, spec, mut depths, images) = sphere_scene();
        // Bias the depths so residuals are far from zero and the objective
        // is smooth around the operating point.
        for frame in &mut depths {
            for d in frame {
                for v in d.values.iter_mut() {
                    *v *= 1.05;
                }
            }
        }
        let pairs = enumerate_pairs(&rig, 2, 1);
        let report = finite_difference_check(
            &rig,
            &spec.trajectory,
            &depths,
            &images,
            &pairs,
            &LossWeights { lambda_det: 0.0, lambda_ov: 1.0, lambda_p: 1.0 },
            &SsimParams::default(),
            &FdOptions { epsilon: 1e-3, samples: 48, seed: 9 },
        )
        .unwrap();
        assert!(report.checked >= 32, "only {} pixels checked", report.checked);
        assert!(
            report.max_rel_err < 1e-4,
            "max rel err {} at {:?}",
            report.max_rel_err,
            report.samples.iter().max_by(|a, b| a.rel_err.partial_cmp(&b.rel_err).unwrap())
        );
    }

    #[test]
    fn weights_validation() {
        let bad = LossWeights { lambda_det: 0.0, lambda_ov: 0.0, lambda_p: 0.0 };
        assert!(bad.validate().is_err());
        let neg = LossWeights { lambda_det: -1.0, lambda_ov: 1.0, lambda_p: 1.0 };
        assert!(neg.validate().is_err());
        assert!(LossWeights::default().validate().is_ok());
        assert!(SsimParams { window: 4, ..SsimParams::default() }.validate().is_err());
    }

    #[test]
    fn total_loss_combines_linearly() {
        let key = PairKey { src_view: 0, dst_view: 1, src_frame: 0, dst_frame: 0 };
        let per = alloc::vec![PairLoss { key, l_ov: 0.3, ov_count: 10, l_p: 0.1, p_count: 5 }];
        let w = LossWeights { lambda_det: 2.0, lambda_ov: 1.0, lambda_p: 0.5 };
        let r = total_loss(0.7, per, &w).unwrap();
        assert!((r.l_total - (2.0 * 0.7 + 0.3 + 0.5 * 0.1)).abs() < 1e-15);
        // Zero-weight terms still reported but not counted in the total.
        let key2 = key;
        let per2 = alloc::vec![PairLoss { key: key2, l_ov: 0.3, ov_count: 10, l_p: 0.1, p_count: 5 }];
        let w2 = LossWeights { lambda_det: 0.0, lambda_ov: 1.0, lambda_p: 0.0 };
        let r2 = total_loss(5.0, per2, &w2).unwrap();
        assert!((r2.l_total - 0.3).abs() < 1e-15);
    }
}
