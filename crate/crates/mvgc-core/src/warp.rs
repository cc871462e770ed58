//! Cross-view correspondence: lift a source depth map, move it through the
//! rig geometry and project it into a target view.

use alloc::vec;
use alloc::vec::Vec;

use crate::camgeom::{self, CameraRig, CameraView, DEPTH_EPS};
use crate::geom::{RigidTransform, Vec3};
use crate::raster::{DepthMap, RasterError};
#[allow(unused_imports)] // shadowed by inherent f64 methods when std is in the build graph
use crate::scalar::FloatExt;

/// Backprojected scene points of a depth map, one per valid pixel,
/// row-major order, camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    /// Flat source pixel index of each point.
    pub pixel_indices: Vec<usize>,
}

/// Per-source-pixel correspondence into a target view.
///
/// `mask` is true only where the source pixel is valid, the moved point has
/// positive target depth and the projection stays inside the target image.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceField {
    /// Source raster dimensions.
    pub width: usize,
    pub height: usize,
    /// Target raster dimensions (for bounds bookkeeping).
    pub target_width: usize,
    pub target_height: usize,
    /// Subpixel target coordinates per source pixel.
    pub target_px: Vec<[f64; 2]>,
    /// Depth of the moved point in the target camera frame.
    pub warped_depth: Vec<f64>,
    pub mask: Vec<bool>,
}

impl CorrespondenceField {
    pub fn mask_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Masked fraction of the source image area.
    pub fn mask_fraction(&self) -> f64 {
        self.mask_count() as f64 / (self.width * self.height) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct WarpOptions {
    /// Keep only the nearest warped point per target pixel cell. Off by
    /// default; the plain formulation is occlusion-blind.
    pub zbuffer: bool,
}

/// One backprojected point per valid depth pixel.
pub fn depth_to_points(view: &CameraView, depth: &DepthMap) -> Result<PointCloud, RasterError> {
    if depth.width != view.intrinsics.width || depth.height != view.intrinsics.height {
        return Err(RasterError::DimensionMismatch);
    }
    let mut points = Vec::new();
    let mut pixel_indices = Vec::new();
    for y in 0..depth.height {
        for x in 0..depth.width {
            let i = depth.idx(x, y);
            if depth.valid[i] {
                let ray = camgeom::pixel_ray(view, [x as f64, y as f64]);
                points.push(ray * depth.values[i]);
                pixel_indices.push(i);
            }
        }
    }
    Ok(PointCloud { points, pixel_indices })
}

/// Warp a source-view depth map into a target view.
pub fn warp_depth(
    src: &CameraView,
    dst: &CameraView,
    depth_src: &DepthMap,
) -> Result<CorrespondenceField, RasterError> {
    warp_depth_with(src, dst, depth_src, WarpOptions::default())
}

pub fn warp_depth_with(
    src: &CameraView,
    dst: &CameraView,
    depth_src: &DepthMap,
    opts: WarpOptions,
) -> Result<CorrespondenceField, RasterError> {
    if depth_src.width != src.intrinsics.width || depth_src.height != src.intrinsics.height {
        return Err(RasterError::DimensionMismatch);
    }
    let n = depth_src.width * depth_src.height;
    let mut field = CorrespondenceField {
        width: depth_src.width,
        height: depth_src.height,
        target_width: dst.intrinsics.width,
        target_height: dst.intrinsics.height,
        target_px: vec![[0.0, 0.0]; n],
        warped_depth: vec![0.0; n],
        mask: vec![false; n],
    };

    // Same camera, same pose: the correspondence is the pixel grid itself.
    // Going through the transform chain would lose bit-exactness.
    let identity = src.intrinsics == dst.intrinsics && src.extrinsics == dst.extrinsics;

    let rel = camgeom::relative_transform(src, dst);
    let (tw, th) = (dst.intrinsics.width as f64, dst.intrinsics.height as f64);
    for y in 0..depth_src.height {
        for x in 0..depth_src.width {
            let i = depth_src.idx(x, y);
            if !depth_src.valid[i] {
                continue;
            }
            if identity {
                field.target_px[i] = [x as f64, y as f64];
                field.warped_depth[i] = depth_src.values[i];
                field.mask[i] = true;
                continue;
            }
            let ray = camgeom::pixel_ray(src, [x as f64, y as f64]);
            let moved = rel.apply(ray * depth_src.values[i]);
            if moved.z <= DEPTH_EPS {
                continue;
            }
            let u = dst.intrinsics.fx * moved.x / moved.z + dst.intrinsics.cx;
            let v = dst.intrinsics.fy * moved.y / moved.z + dst.intrinsics.cy;
            if u >= 0.0 && u < tw && v >= 0.0 && v < th {
                field.target_px[i] = [u, v];
                field.warped_depth[i] = moved.z;
                field.mask[i] = true;
            }
        }
    }

    if opts.zbuffer {
        apply_zbuffer(&mut field);
    }
    Ok(field)
}

/// Keeps only the nearest warped point in each integer target cell.
fn apply_zbuffer(field: &mut CorrespondenceField) {
    let cells = field.target_width * field.target_height;
    let mut nearest = vec![f64::INFINITY; cells];
    for i in 0..field.mask.len() {
        if field.mask[i] {
            let c = cell_of(field, i);
            if field.warped_depth[i] < nearest[c] {
                nearest[c] = field.warped_depth[i];
            }
        }
    }
    for i in 0..field.mask.len() {
        if field.mask[i] {
            let c = cell_of(field, i);
            if field.warped_depth[i] > nearest[c] {
                field.mask[i] = false;
            }
        }
    }
}

fn cell_of(field: &CorrespondenceField, i: usize) -> usize {
    let u = field.target_px[i][0].round() as usize;
    let v = field.target_px[i][1].round() as usize;
    u.min(field.target_width - 1) + field.target_width * v.min(field.target_height - 1)
}

/// View with its extrinsics composed with an ego (frame) pose, so that
/// cross-frame warps go through a shared world frame.
pub fn posed_view(view: &CameraView, ego_pose: &RigidTransform) -> CameraView {
    CameraView {
        id: view.id.clone(),
        intrinsics: view.intrinsics,
        extrinsics: ego_pose.compose(&view.extrinsics),
    }
}

/// Ordered (source, target) pair of (view index, frame index).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairKey {
    pub src_view: usize,
    pub dst_view: usize,
    pub src_frame: usize,
    pub dst_frame: usize,
}

impl PairKey {
    pub fn is_temporal(&self) -> bool {
        self.src_frame != self.dst_frame
    }
}

/// Enumerates, in a fixed deterministic order, both directions of every
/// spatial adjacency within each frame, then same-view pairs across frames
/// within the temporal window.
pub fn enumerate_pairs(rig: &CameraRig, frames: usize, temporal_window: usize) -> Vec<PairKey> {
    let mut pairs = Vec::new();
    for f in 0..frames {
        for (a, b) in rig.adjacency() {
            let ia = rig.view_index(a).expect("adjacency id exists");
            let ib = rig.view_index(b).expect("adjacency id exists");
            pairs.push(PairKey { src_view: ia, dst_view: ib, src_frame: f, dst_frame: f });
            pairs.push(PairKey { src_view: ib, dst_view: ia, src_frame: f, dst_frame: f });
        }
    }
    for v in 0..rig.views().len() {
        for f in 0..frames {
            for df in 1..=temporal_window {
                let f2 = f + df;
                if f2 < frames {
                    pairs.push(PairKey { src_view: v, dst_view: v, src_frame: f, dst_frame: f2 });
                    pairs.push(PairKey { src_view: v, dst_view: v, src_frame: f2, dst_frame: f });
                }
            }
        }
    }
    pairs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camgeom::{make_preset_rig, RigPreset};
    use crate::geom::Mat3;
    use alloc::string::String;

    fn mono_view() -> CameraView {
        make_preset_rig(RigPreset::Mono1).views()[0].clone()
    }

    fn uniform_depth(view: &CameraView, d: f64) -> DepthMap {
        let mut m = DepthMap::new(view.intrinsics.width, view.intrinsics.height);
        for y in 0..m.height {
            for x in 0..m.width {
                m.set(x, y, d);
            }
        }
        m
    }

    #[test]
    fn points_of_uniform_depth_share_z() {
        let v = mono_view();
        let d = uniform_depth(&v, 4.0);
        let pc = depth_to_points(&v, &d).unwrap();
        assert_eq!(pc.points.len(), d.valid_count());
        assert!(pc.points.iter().all(|p| (p.z - 4.0).abs() < 1e-15));
    }

    #[test]
    fn single_pixel_at_principal_point() {
        let v = mono_view();
        let mut d = DepthMap::new(v.intrinsics.width, v.intrinsics.height);
        d.set(176, 64, 3.0);
        let pc = depth_to_points(&v, &d).unwrap();
        assert_eq!(pc.points.len(), 1);
        assert!((pc.points[0] - Vec3::new(0.0, 0.0, 3.0)).norm() < 1e-12);
    }

    #[test]
    fn identity_warp_is_bit_exact() {
        let v = mono_view();
        let mut d = uniform_depth(&v, 7.5);
        d.valid[42] = false;
        let f = warp_depth(&v, &v, &d).unwrap();
        for y in 0..d.height {
            for x in 0..d.width {
                let i = d.idx(x, y);
                assert_eq!(f.mask[i], d.valid[i]);
                if f.mask[i] {
                    assert_eq!(f.target_px[i], [x as f64, y as f64]);
                    assert_eq!(f.warped_depth[i], d.values[i]);
                }
            }
        }
    }

    #[test]
    fn forward_translation_shrinks_depth() {
        let src = mono_view();
        let mut dst = mono_view();
        dst.id = String::from("fwd");
        // dst sits 2 m ahead of src along the shared optical axis (ego +x).
        dst.extrinsics = RigidTransform::new(
            *src.extrinsics.rotation(),
            src.extrinsics.translation() + Vec3::new(2.0, 0.0, 0.0),
        )
        .unwrap();
        let d = uniform_depth(&src, 10.0);
        let f = warp_depth(&src, &dst, &d).unwrap();
        assert!(f.mask_count() > 0);
        for i in 0..f.mask.len() {
            if f.mask[i] {
                assert!((f.warped_depth[i] - 8.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mask_round_trips_to_source_pixel() {
        let rig = make_preset_rig(RigPreset::Nuscenes6);
        let (src, dst) = (&rig.views()[0], &rig.views()[1]);
        let d = uniform_depth(src, 12.0);
        let f = warp_depth(src, dst, &d).unwrap();
        assert!(f.mask_count() > 0);
        let back = camgeom::relative_transform(dst, src);
        for y in 0..d.height {
            for x in 0..d.width {
                let i = d.idx(x, y);
                if !f.mask[i] {
                    continue;
                }
                let p = camgeom::backproject(dst, f.target_px[i], f.warped_depth[i]).unwrap();
                let q = back.apply(p);
                let (px, _) = camgeom::project(src, q).unwrap();
                let err = (px[0] - x as f64).hypot(px[1] - y as f64);
                assert!(err < 1e-6, "round trip err {err}");
            }
        }
    }

    #[test]
    fn zbuffer_masks_farther_duplicates() {
        let src = mono_view();
        let mut dst = mono_view();
        dst.id = String::from("rot");
        dst.extrinsics = RigidTransform::new(
            *src.extrinsics.rotation() * Mat3::rot_y(0.4),
            src.extrinsics.translation(),
        )
        .unwrap();
        let d = uniform_depth(&src, 10.0);
        let plain = warp_depth(&src, &dst, &d).unwrap();
        let z = warp_depth_with(&src, &dst, &d, WarpOptions { zbuffer: true }).unwrap();
        assert!(z.mask_count() <= plain.mask_count());
    }

    #[test]
    fn pair_enumeration_counts() {
        let mono = make_preset_rig(RigPreset::Mono1);
        assert!(enumerate_pairs(&mono, 1, 0).is_empty());
        let n6 = make_preset_rig(RigPreset::Nuscenes6);
        assert_eq!(enumerate_pairs(&n6, 1, 0).len(), 12);
        let pairs = enumerate_pairs(&n6, 2, 1);
        assert_eq!(pairs.len(), 36);
        // Brute-force recount: spatial both directions per frame, temporal
        // same-view both directions inside the window.
        let mut expected = 0;
        for _f in 0..2 {
            expected += n6.adjacency().len() * 2;
        }
        expected += n6.views().len() * 2;
        assert_eq!(pairs.len(), expected);
        assert_eq!(pairs.iter().filter(|p| p.is_temporal()).count(), 12);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let v = mono_view();
        let d = DepthMap::new(10, 10);
        assert!(warp_depth(&v, &v, &d).is_err());
        assert!(depth_to_points(&v, &d).is_err());
    }
}
