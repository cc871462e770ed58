//! Pinhole cameras, multi-camera rigs, presets and extrinsic perturbations.
//!
//! Conventions (fixed across the crate):
//! - Camera frame: +z along the optical axis, +x right, +y down.
//! - Ego frame: +x forward, +y left, +z up; the ground plane is z = 0.
//! - Extrinsics map camera coordinates to the ego frame (camera-to-ego).

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::geom::{Mat3, RigidTransform, Vec3};
#[allow(unused_imports)] // shadowed by inherent f64 methods when std is in the build graph
use crate::scalar::FloatExt;

pub const DEPTH_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CamError {
    /// Projection or backprojection with non-positive depth.
    DegenerateDepth,
    /// Intrinsics violate fx, fy > 0 or principal point inside the image.
    InvalidIntrinsics,
    /// Rig invariant broken: empty rig, duplicate ids, bad adjacency.
    InvalidRig,
    UnknownPreset,
    /// Shift fields inconsistent with the shift mode.
    InvalidShift,
}

impl fmt::Display for CamError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CamError::DegenerateDepth => "depth must be positive",
            CamError::InvalidIntrinsics => "invalid camera intrinsics",
            CamError::InvalidRig => "invalid camera rig",
            CamError::UnknownPreset => "unknown rig preset (known: nuscenes6, front3, mono1)",
            CamError::InvalidShift => "shift fields inconsistent with shift mode",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, CamError> {
        let k = CameraIntrinsics { fx, fy, cx, cy, width, height };
        if fx > 0.0
            && fy > 0.0
            && cx > 0.0
            && cx < width as f64
            && cy > 0.0
            && cy < height as f64
        {
            Ok(k)
        } else {
            Err(CamError::InvalidIntrinsics)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    pub id: String,
    pub intrinsics: CameraIntrinsics,
    /// Camera-to-ego transform.
    pub extrinsics: RigidTransform,
}

impl CameraView {
    /// Camera center in the ego frame.
    pub fn center(&self) -> Vec3 {
        self.extrinsics.translation()
    }

    /// Optical axis direction in the ego frame.
    pub fn optical_axis(&self) -> Vec3 {
        self.extrinsics.rotate(Vec3::new(0.0, 0.0, 1.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    views: Vec<CameraView>,
    adjacency: Vec<(String, String)>,
}

impl CameraRig {
    /// `adjacency` holds unordered pairs of view ids treated as spatial
    /// neighbors. Ids must be unique, pairs must reference existing views
    /// and must not be self-pairs.
    pub fn new(views: Vec<CameraView>, adjacency: Vec<(String, String)>) -> Result<Self, CamError> {
        if views.is_empty() {
            return Err(CamError::InvalidRig);
        }
        for (i, v) in views.iter().enumerate() {
            if views[..i].iter().any(|w| w.id == v.id) {
                return Err(CamError::InvalidRig);
            }
        }
        for (a, b) in &adjacency {
            if a == b {
                return Err(CamError::InvalidRig);
            }
            let has = |id: &String| views.iter().any(|v| &v.id == id);
            if !has(a) || !has(b) {
                return Err(CamError::InvalidRig);
            }
        }
        Ok(CameraRig { views, adjacency })
    }

    pub fn views(&self) -> &[CameraView] {
        &self.views
    }

    pub fn adjacency(&self) -> &[(String, String)] {
        &self.adjacency
    }

    pub fn view(&self, id: &str) -> Option<&CameraView> {
        self.views.iter().find(|v| v.id == id)
    }

    pub fn view_index(&self, id: &str) -> Option<usize> {
        self.views.iter().position(|v| v.id == id)
    }
}

/// Projects a camera-frame point to pixel coordinates and depth.
///
/// No bounds check is applied; callers mask out-of-image projections.
pub fn project(view: &CameraView, point_cam: Vec3) -> Result<([f64; 2], f64), CamError> {
    if point_cam.z <= DEPTH_EPS {
        return Err(CamError::DegenerateDepth);
    }
    let k = &view.intrinsics;
    let u = k.fx * point_cam.x / point_cam.z + k.cx;
    let v = k.fy * point_cam.y / point_cam.z + k.cy;
    Ok(([u, v], point_cam.z))
}

/// Lifts a pixel at the given depth back to the camera frame.
pub fn backproject(view: &CameraView, pixel: [f64; 2], depth: f64) -> Result<Vec3, CamError> {
    if depth <= 0.0 {
        return Err(CamError::DegenerateDepth);
    }
    let k = &view.intrinsics;
    Ok(Vec3::new(
        (pixel[0] - k.cx) * depth / k.fx,
        (pixel[1] - k.cy) * depth / k.fy,
        depth,
    ))
}

/// Unit-depth ray direction of a pixel in the camera frame (z component 1).
pub fn pixel_ray(view: &CameraView, pixel: [f64; 2]) -> Vec3 {
    let k = &view.intrinsics;
    Vec3::new((pixel[0] - k.cx) / k.fx, (pixel[1] - k.cy) / k.fy, 1.0)
}

/// Transform mapping `src` camera coordinates to `dst` camera coordinates.
pub fn relative_transform(src: &CameraView, dst: &CameraView) -> RigidTransform {
    dst.extrinsics.inverse().compose(&src.extrinsics)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RigPreset {
    /// Six-camera surround ring, 60 degree yaw spacing.
    Nuscenes6,
    /// Three forward cameras.
    Front3,
    /// One forward camera.
    Mono1,
}

impl RigPreset {
    pub fn from_name(name: &str) -> Result<Self, CamError> {
        match name {
            "nuscenes6" => Ok(RigPreset::Nuscenes6),
            "front3" => Ok(RigPreset::Front3),
            "mono1" => Ok(RigPreset::Mono1),
            _ => Err(CamError::UnknownPreset),
        }
    }
}

/// Default raster size of the presets.
pub const PRESET_WIDTH: usize = 352;
pub const PRESET_HEIGHT: usize = 128;
/// Camera mounting height of the presets, meters.
pub const PRESET_CAM_HEIGHT: f64 = 1.5;
/// Radial offset of the preset camera centers from the ego origin, meters.
pub const PRESET_CAM_RADIUS: f64 = 0.5;
/// Preset focal length in pixels. With a 352 pixel wide image this gives a
/// horizontal field of view of about 85 degrees, so adjacent views of the
/// 60-degree ring share a 25-degree wedge (roughly a third of the image).
pub const PRESET_FOCAL: f64 = 192.0;

/// Camera-to-ego rotation for a camera with optical axis at `yaw` radians
/// from ego +x (counterclockwise from above), level with the ground.
pub fn heading_rotation(yaw: f64) -> Mat3 {
    // Base orientation (yaw 0): cam z -> ego x, cam x -> ego -y, cam y -> ego -z.
    let base = Mat3::from_rows([0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]);
    Mat3::rot_z(yaw) * base
}

fn ring_view(id: &str, yaw: f64, fx: f64) -> CameraView {
    let c = Vec3::new(
        PRESET_CAM_RADIUS * yaw.cos(),
        PRESET_CAM_RADIUS * yaw.sin(),
        PRESET_CAM_HEIGHT,
    );
    CameraView {
        id: String::from(id),
        intrinsics: CameraIntrinsics::new(
            fx,
            fx,
            PRESET_WIDTH as f64 / 2.0,
            PRESET_HEIGHT as f64 / 2.0,
            PRESET_WIDTH,
            PRESET_HEIGHT,
        )
        .expect("preset intrinsics are valid"),
        extrinsics: RigidTransform::new(heading_rotation(yaw), c)
            .expect("preset rotation is orthonormal"),
    }
}

/// Builds one of the fixed demo rigs. All numbers are documented crate
/// constants, chosen so that adjacent views of `nuscenes6` overlap by
/// roughly 30% of the image.
pub fn make_preset_rig(preset: RigPreset) -> CameraRig {
    let deg = core::f64::consts::PI / 180.0;
    match preset {
        RigPreset::Nuscenes6 => {
            let names = [
                "cam_front",
                "cam_front_left",
                "cam_back_left",
                "cam_back",
                "cam_back_right",
                "cam_front_right",
            ];
            let views: Vec<CameraView> = names
                .iter()
                .enumerate()
                .map(|(i, n)| ring_view(n, 60.0 * i as f64 * deg, PRESET_FOCAL))
                .collect();
            let adjacency = (0..6)
                .map(|i| (String::from(names[i]), String::from(names[(i + 1) % 6])))
                .collect();
            CameraRig::new(views, adjacency).expect("preset rig is valid")
        }
        RigPreset::Front3 => {
            let views = alloc::vec![
                ring_view("cam_front_left", 55.0 * deg, 251.0),
                ring_view("cam_front", 0.0, 251.0),
                ring_view("cam_front_right", -55.0 * deg, 251.0),
            ];
            let adjacency = alloc::vec![
                (String::from("cam_front_left"), String::from("cam_front")),
                (String::from("cam_front"), String::from("cam_front_right")),
            ];
            CameraRig::new(views, adjacency).expect("preset rig is valid")
        }
        RigPreset::Mono1 => {
            let views = alloc::vec![ring_view("cam_front", 0.0, 251.0)];
            CameraRig::new(views, Vec::new()).expect("preset rig is valid")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftMode {
    /// Only `dz` may be nonzero.
    Height,
    /// Only `dpitch` may be nonzero.
    Pitch,
    /// Lateral translation and yaw flip sign with the view's side.
    All,
    Custom,
}

/// Extrinsic perturbation of a rig, modeling a change in sensor mounting.
///
/// Translations are in the ego frame, meters. `dpitch > 0` tilts the optical
/// axis toward the ground; `dyaw > 0` turns it toward the camera's local
/// right. For [`ShiftMode::All`], `dy` and `dyaw` are applied with a per-view
/// sign: views on the ego-left half (`center.y > 0`) use `+`, views on the
/// right use `-`, centered views use `+`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftSpec {
    pub mode: ShiftMode,
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub dpitch: f64,
    pub dyaw: f64,
}

impl ShiftSpec {
    pub const ZERO: ShiftSpec = ShiftSpec {
        mode: ShiftMode::Custom,
        dx: 0.0,
        dy: 0.0,
        dz: 0.0,
        dpitch: 0.0,
        dyaw: 0.0,
    };

    pub fn height(dz: f64) -> ShiftSpec {
        ShiftSpec { mode: ShiftMode::Height, dz, ..ShiftSpec::ZERO }
    }

    pub fn pitch(dpitch: f64) -> ShiftSpec {
        ShiftSpec { mode: ShiftMode::Pitch, dpitch, ..ShiftSpec::ZERO }
    }

    pub fn validate(&self) -> Result<(), CamError> {
        let ok = match self.mode {
            ShiftMode::Height => {
                self.dx == 0.0 && self.dy == 0.0 && self.dpitch == 0.0 && self.dyaw == 0.0
            }
            ShiftMode::Pitch => {
                self.dx == 0.0 && self.dy == 0.0 && self.dz == 0.0 && self.dyaw == 0.0
            }
            ShiftMode::All | ShiftMode::Custom => true,
        };
        if ok {
            Ok(())
        } else {
            Err(CamError::InvalidShift)
        }
    }
}

/// Returns a new rig with every view's extrinsics composed with the shift.
/// The input rig is untouched.
pub fn perturb_rig(rig: &CameraRig, shift: &ShiftSpec) -> Result<CameraRig, CamError> {
    shift.validate()?;
    let views = rig
        .views()
        .iter()
        .map(|v| {
            let side = if matches!(shift.mode, ShiftMode::All) && v.center().y < 0.0 {
                -1.0
            } else {
                1.0
            };
            let t = v.extrinsics.translation()
                + Vec3::new(shift.dx, shift.dy * side, shift.dz);
            // Local-axis rotations composed after the base orientation; the
            // sign flips map "pitch down" / "yaw outward" onto camera axes.
            let r = *v.extrinsics.rotation()
                * Mat3::rot_x(-shift.dpitch)
                * Mat3::rot_y(shift.dyaw * side);
            CameraView {
                id: v.id.clone(),
                intrinsics: v.intrinsics,
                extrinsics: RigidTransform::new(r, t).expect("rotation stays orthonormal"),
            }
        })
        .collect();
    CameraRig::new(views, rig.adjacency().to_vec())
}

/// Closed-form depth change of a ground point seen from camera height `h0`
/// versus `h0 + dh`, at horizontal distance `ground_range`.
pub fn depth_scale_shift(ground_range: f64, h0: f64, dh: f64) -> (f64, f64, f64) {
    let d0 = ground_range.hypot(h0);
    let d1 = ground_range.hypot(h0 + dh);
    (d0, d1, d1 - d0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_view() -> CameraView {
        CameraView {
            id: String::from("t"),
            intrinsics: CameraIntrinsics::new(100.0, 100.0, 176.0, 128.0, 352, 256).unwrap(),
            extrinsics: RigidTransform::IDENTITY,
        }
    }

    #[test]
    fn optical_axis_point_hits_principal_point() {
        let v = test_view();
        let (px, d) = project(&v, Vec3::new(0.0, 0.0, 5.0)).unwrap();
        assert_eq!(px, [176.0, 128.0]);
        assert_eq!(d, 5.0);
    }

    #[test]
    fn lateral_offset_projection() {
        let v = test_view();
        let (px, _) = project(&v, Vec3::new(1.0, 0.0, 2.0)).unwrap();
        assert!((px[0] - 226.0).abs() < 1e-12);
    }

    #[test]
    fn backproject_principal_point() {
        let v = test_view();
        let p = backproject(&v, [176.0, 128.0], 7.0).unwrap();
        assert_eq!(p, Vec3::new(0.0, 0.0, 7.0));
        let q = backproject(&v, [276.0, 128.0], 1.0).unwrap();
        assert!((q - Vec3::new(1.0, 0.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn project_backproject_round_trip() {
        let v = test_view();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let p = Vec3::new(
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(0.1..50.0),
            );
            let (px, d) = project(&v, p).unwrap();
            let q = backproject(&v, px, d).unwrap();
            assert!((q - p).norm() / p.norm() < 1e-10);
        }
    }

    #[test]
    fn degenerate_depth_rejected() {
        let v = test_view();
        assert_eq!(
            project(&v, Vec3::new(0.0, 0.0, 0.0)),
            Err(CamError::DegenerateDepth)
        );
        assert!(backproject(&v, [0.0, 0.0], -1.0).is_err());
    }

    #[test]
    fn relative_transform_identity_and_inverse_pair() {
        let rig = make_preset_rig(RigPreset::Nuscenes6);
        let a = &rig.views()[0];
        let b = &rig.views()[1];
        let same = relative_transform(a, a);
        assert!((same.translation()).norm() < 1e-12);
        let fwd = relative_transform(a, b);
        let back = relative_transform(b, a);
        let round = fwd.compose(&back);
        assert!((round.translation()).norm() < 1e-9);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((round.rotation().m[i][j] - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn relative_transform_pure_forward_offset() {
        let mut a = test_view();
        let dst = test_view();
        // src sits 2 m behind dst along the shared optical axis (cam +z).
        a.extrinsics = RigidTransform::from_translation(Vec3::new(0.0, 0.0, -2.0));
        let rel = relative_transform(&a, &dst);
        assert!((rel.translation() - Vec3::new(0.0, 0.0, -2.0)).norm() < 1e-12);
        // A point at src depth 5 lands at dst depth 3.
        let p = rel.apply(Vec3::new(0.0, 0.0, 5.0));
        assert!((p - Vec3::new(0.0, 0.0, 3.0)).norm() < 1e-12);
    }

    #[test]
    fn relative_transform_groupoid() {
        let rig = make_preset_rig(RigPreset::Nuscenes6);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let pick = |rng: &mut ChaCha8Rng| rng.gen_range(0..rig.views().len());
            let (a, b, c) = (pick(&mut rng), pick(&mut rng), pick(&mut rng));
            let (va, vb, vc) = (&rig.views()[a], &rig.views()[b], &rig.views()[c]);
            let lhs = relative_transform(va, vc);
            let rhs = relative_transform(vb, vc).compose(&relative_transform(va, vb));
            assert!((lhs.translation() - rhs.translation()).norm() < 1e-9);
            for i in 0..3 {
                for j in 0..3 {
                    assert!((lhs.rotation().m[i][j] - rhs.rotation().m[i][j]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn presets_have_expected_topology() {
        let n6 = make_preset_rig(RigPreset::Nuscenes6);
        assert_eq!(n6.views().len(), 6);
        assert_eq!(n6.adjacency().len(), 6);
        let m1 = make_preset_rig(RigPreset::Mono1);
        assert_eq!(m1.views().len(), 1);
        assert_eq!(m1.adjacency().len(), 0);
        assert_eq!(RigPreset::from_name("bogus"), Err(CamError::UnknownPreset));
    }

    #[test]
    fn perturb_height_raises_all_centers() {
        let rig = make_preset_rig(RigPreset::Nuscenes6);
        let shifted = perturb_rig(&rig, &ShiftSpec::height(0.65)).unwrap();
        for (v, w) in rig.views().iter().zip(shifted.views()) {
            let d = w.center() - v.center();
            assert!((d.z - 0.65).abs() < 1e-12 && d.x == 0.0 && d.y == 0.0);
            assert_eq!(v.extrinsics.rotation(), w.extrinsics.rotation());
        }
    }

    #[test]
    fn perturb_pitch_tilts_axes_keeps_centers() {
        let deg5 = 5.0_f64.to_radians();
        let rig = make_preset_rig(RigPreset::Nuscenes6);
        let shifted = perturb_rig(&rig, &ShiftSpec::pitch(deg5)).unwrap();
        for (v, w) in rig.views().iter().zip(shifted.views()) {
            assert_eq!(v.center(), w.center());
            let cosang = v.optical_axis().dot(w.optical_axis());
            assert!((cosang - deg5.cos()).abs() < 1e-12);
            // Tilted toward the ground.
            assert!(w.optical_axis().z < v.optical_axis().z);
        }
    }

    #[test]
    fn zero_shift_is_identity() {
        let rig = make_preset_rig(RigPreset::Nuscenes6);
        let same = perturb_rig(&rig, &ShiftSpec::ZERO).unwrap();
        assert_eq!(rig, same);
    }

    #[test]
    fn invalid_shift_rejected() {
        let bad = ShiftSpec { dx: 0.1, ..ShiftSpec::height(0.65) };
        assert_eq!(
            perturb_rig(&make_preset_rig(RigPreset::Mono1), &bad),
            Err(CamError::InvalidShift)
        );
    }

    #[test]
    fn depth_scale_shift_closed_form_and_monotone() {
        let (_, _, zero) = depth_scale_shift(10.0, 1.5, 0.0);
        assert_eq!(zero, 0.0);
        let (d0, d1, delta) = depth_scale_shift(10.0, 1.5, 0.65);
        assert!((d0 - (10.0_f64 * 10.0 + 1.5 * 1.5).sqrt()).abs() < 1e-12);
        assert!((d1 - (10.0_f64 * 10.0 + 2.15 * 2.15).sqrt()).abs() < 1e-12);
        assert!((delta - (d1 - d0)).abs() < 1e-15);
        let (_, _, small) = depth_scale_shift(10.0, 1.5, 0.2);
        assert!(delta > small && small > 0.0);
    }
}
