//! Analytic test scenes: ray-cast depth maps, shaded RGB images and box
//! ground truths for a camera rig moving through simple geometry.
//!
//! Rendering is exact (closed-form ray intersections) and deterministic, so
//! depth maps agree with the rig geometry to floating-point precision. All
//! shading is view independent (Lambertian plus ambient, albedo modulated by
//! a smooth world-position texture), which makes images of the same surface
//! point photometrically consistent across views.

use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camgeom::{perturb_rig, CamError, CameraRig, CameraView, ShiftSpec};
use crate::consist::{self, ConsistError, LossWeights, PairKey, SsimParams};
use crate::evalkit::Box3D;
use crate::geom::{Mat3, RigidTransform, Vec3};
use crate::raster::{DepthMap, RgbImage};
#[allow(unused_imports)] // shadowed by inherent f64 methods when std is in the build graph
use crate::scalar::FloatExt;
use crate::warp::{enumerate_pairs, posed_view, warp_depth};

/// Minimum clearance between any camera center and any surface, meters.
const CAMERA_CLEARANCE: f64 = 0.1;
const RAY_T_MIN: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub enum SceneError {
    /// Empty trajectory, non-planar ego pose, or a camera too close to a
    /// surface.
    InvalidScene,
    Cam(CamError),
    Consist(ConsistError),
}

impl fmt::Display for SceneError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SceneError::InvalidScene => f.write_str("invalid scene specification"),
            SceneError::Cam(e) => write!(f, "camera error: {e}"),
            SceneError::Consist(e) => write!(f, "consistency error: {e}"),
        }
    }
}

impl From<CamError> for SceneError {
    fn from(e: CamError) -> Self {
        SceneError::Cam(e)
    }
}

impl From<ConsistError> for SceneError {
    fn from(e: ConsistError) -> Self {
        SceneError::Consist(e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SceneObject {
    /// Axis box with a yaw about world z; size is full extent (l, w, h).
    Box {
        center: Vec3,
        size: Vec3,
        yaw: f64,
        albedo: [f64; 3],
        /// Whether the box appears in the ground-truth annotations.
        annotate: bool,
    },
    Sphere {
        center: Vec3,
        radius: f64,
        albedo: [f64; 3],
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    /// Ground plane z = 0 with this albedo, if present.
    pub ground: Option<[f64; 3]>,
    pub objects: Vec<SceneObject>,
    /// Per-frame ego-to-world pose; rotations must be about world z.
    pub trajectory: Vec<RigidTransform>,
    /// Unit direction from the scene toward the light.
    pub light_dir: Vec3,
    pub ambient: f64,
    /// Relative amplitude of the world-position albedo texture, in [0, 1).
    pub texture_amp: f64,
    /// Spatial frequency of the texture, radians per meter.
    pub texture_freq: f64,
    /// Per-axis phase of the texture.
    pub texture_phase: [f64; 3],
    /// Hits beyond this camera depth are treated as sky, if set.
    pub max_range: Option<f64>,
    pub sky_rgb: [f64; 3],
}

impl SceneSpec {
    pub fn frames(&self) -> usize {
        self.trajectory.len()
    }

    fn base(seed: u64, frames: usize, step: Vec3, dyaw: f64) -> SceneSpec {
        let trajectory = (0..frames)
            .map(|f| {
                let s = f as f64;
                RigidTransform::new(Mat3::rot_z(dyaw * s), step * s)
                    .expect("z rotation is orthonormal")
            })
            .collect();
        SceneSpec {
            seed,
            ground: None,
            objects: Vec::new(),
            trajectory,
            light_dir: Vec3::new(0.3, 0.2, 0.9).normalized(),
            ambient: 0.4,
            texture_amp: 0.35,
            texture_freq: 0.35,
            texture_phase: [0.0, 2.1, 4.2],
            max_range: None,
            sky_rgb: [0.55, 0.7, 0.9],
        }
    }

    /// A rig inside one large textured sphere. Every ray hits the wall
    /// nearly head-on, so depth varies slowly across pixels and resampling
    /// error is tiny; there is no occlusion and no sky. This is the scene
    /// used for the numerically strict consistency checks.
    pub fn sphere_room(seed: u64, frames: usize) -> SceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut spec = SceneSpec::base(seed, frames, Vec3::new(0.3, 0.05, 0.0), 0.02);
        spec.texture_phase = [
            rng.gen_range(0.0..core::f64::consts::TAU),
            rng.gen_range(0.0..core::f64::consts::TAU),
            rng.gen_range(0.0..core::f64::consts::TAU),
        ];
        let radius = rng.gen_range(19.0..21.0);
        spec.objects.push(SceneObject::Sphere {
            center: Vec3::new(0.5, -0.3, 1.5),
            radius,
            albedo: [0.85, 0.8, 0.7],
        });
        spec
    }

    /// An open yard: ground plane, four wall boxes, and a seeded scatter of
    /// car-sized annotated boxes and spheres around the ego path.
    pub fn yard(seed: u64, frames: usize) -> SceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut spec = SceneSpec::base(seed, frames, Vec3::new(0.4, 0.0, 0.0), 0.0);
        spec.ground = Some([0.45, 0.45, 0.4]);
        let walls = [
            (Vec3::new(18.0, 0.0, 2.0), Vec3::new(1.0, 37.0, 4.0)),
            (Vec3::new(-18.0, 0.0, 2.0), Vec3::new(1.0, 37.0, 4.0)),
            (Vec3::new(0.0, 18.0, 2.0), Vec3::new(37.0, 1.0, 4.0)),
            (Vec3::new(0.0, -18.0, 2.0), Vec3::new(37.0, 1.0, 4.0)),
        ];
        for (center, size) in walls {
            spec.objects.push(SceneObject::Box {
                center,
                size,
                yaw: 0.0,
                albedo: [0.7, 0.45, 0.3],
                annotate: false,
            });
        }
        for _ in 0..5 {
            let ang = rng.gen_range(0.0..core::f64::consts::TAU);
            let r = rng.gen_range(6.0..14.0);
            let yaw = rng.gen_range(-core::f64::consts::PI..core::f64::consts::PI);
            spec.objects.push(SceneObject::Box {
                center: Vec3::new(r * ang.cos(), r * ang.sin(), 0.8),
                size: Vec3::new(4.5, 1.9, 1.6),
                yaw,
                albedo: [rng.gen_range(0.2..0.9), rng.gen_range(0.2..0.9), rng.gen_range(0.2..0.9)],
                annotate: true,
            });
        }
        for _ in 0..3 {
            let ang = rng.gen_range(0.0..core::f64::consts::TAU);
            let r = rng.gen_range(7.0..13.0);
            spec.objects.push(SceneObject::Sphere {
                center: Vec3::new(r * ang.cos(), r * ang.sin(), 1.0),
                radius: rng.gen_range(0.6..1.4),
                albedo: [rng.gen_range(0.3..0.9); 3],
            });
        }
        spec
    }
}

/// Rendered outputs of one frame, indexed like the rig's view list.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBundle {
    pub depths: Vec<DepthMap>,
    pub images: Vec<RgbImage>,
    /// Annotated boxes in the ego frame of this frame.
    pub boxes: Vec<Box3D>,
}

struct Hit {
    t: f64,
    normal: Vec3,
    albedo: [f64; 3],
}

fn hit_plane(origin: Vec3, dir: Vec3, albedo: [f64; 3]) -> Option<Hit> {
    if dir.z.abs() < 1e-12 {
        return None;
    }
    let t = -origin.z / dir.z;
    if t > RAY_T_MIN {
        Some(Hit { t, normal: Vec3::new(0.0, 0.0, 1.0), albedo })
    } else {
        None
    }
}

fn hit_sphere(origin: Vec3, dir: Vec3, center: Vec3, radius: f64, albedo: [f64; 3]) -> Option<Hit> {
    let oc = origin - center;
    let a = dir.dot(dir);
    let b = 2.0 * dir.dot(oc);
    let c = oc.dot(oc) - radius * radius;
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t1 = (-b - sq) / (2.0 * a);
    let t2 = (-b + sq) / (2.0 * a);
    let t = if t1 > RAY_T_MIN {
        t1
    } else if t2 > RAY_T_MIN {
        t2
    } else {
        return None;
    };
    let normal = ((origin + dir * t) - center).normalized();
    Some(Hit { t, normal, albedo })
}

fn hit_box(
    origin: Vec3,
    dir: Vec3,
    center: Vec3,
    size: Vec3,
    yaw: f64,
    albedo: [f64; 3],
) -> Option<Hit> {
    let rot = Mat3::rot_z(-yaw);
    let o = rot * (origin - center);
    let d = rot * dir;
    let half = [size.x / 2.0, size.y / 2.0, size.z / 2.0];
    let (mut t_near, mut t_far) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut near_axis = (0usize, 1.0f64);
    let o_arr = [o.x, o.y, o.z];
    let d_arr = [d.x, d.y, d.z];
    for ax in 0..3 {
        if d_arr[ax].abs() < 1e-12 {
            if o_arr[ax].abs() > half[ax] {
                return None;
            }
            continue;
        }
        let mut ta = (-half[ax] - o_arr[ax]) / d_arr[ax];
        let mut tb = (half[ax] - o_arr[ax]) / d_arr[ax];
        let mut sign = -1.0;
        if ta > tb {
            core::mem::swap(&mut ta, &mut tb);
            sign = 1.0;
        }
        if ta > t_near {
            t_near = ta;
            near_axis = (ax, sign);
        }
        t_far = t_far.min(tb);
        if t_near > t_far {
            return None;
        }
    }
    // Rays starting inside a box see nothing: validation forbids cameras
    // inside boxes, so only the entering face matters.
    if t_near <= RAY_T_MIN {
        return None;
    }
    let t = t_near;
    let mut n = [0.0; 3];
    n[near_axis.0] = near_axis.1;
    let n_local = Vec3::new(n[0], n[1], n[2]);
    Some(Hit { t, normal: Mat3::rot_z(yaw) * n_local, albedo })
}

fn cast_ray(spec: &SceneSpec, origin: Vec3, dir: Vec3) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    let mut consider = |h: Option<Hit>| {
        if let Some(h) = h {
            if best.as_ref().map_or(true, |b| h.t < b.t) {
                best = Some(h);
            }
        }
    };
    if let Some(albedo) = spec.ground {
        consider(hit_plane(origin, dir, albedo));
    }
    for obj in &spec.objects {
        match obj {
            SceneObject::Sphere { center, radius, albedo } => {
                consider(hit_sphere(origin, dir, *center, *radius, *albedo));
            }
            SceneObject::Box { center, size, yaw, albedo, .. } => {
                consider(hit_box(origin, dir, *center, *size, *yaw, *albedo));
            }
        }
    }
    best
}

/// Smooth world-position albedo modulation in [1 - amp, 1].
fn texture(spec: &SceneSpec, p: Vec3) -> f64 {
    let f = spec.texture_freq;
    let ph = spec.texture_phase;
    let t = 0.5
        * (1.0
            + (f * p.x + ph[0]).sin() * (f * p.y + ph[1]).sin() * (f * p.z + ph[2]).sin());
    1.0 - spec.texture_amp + spec.texture_amp * t
}

fn shade(spec: &SceneSpec, point: Vec3, mut normal: Vec3, view_dir: Vec3, albedo: [f64; 3]) -> [f64; 3] {
    // Use the viewer-facing side of the surface.
    if normal.dot(view_dir) > 0.0 {
        normal = -normal;
    }
    let lambert = normal.dot(spec.light_dir).max(0.0);
    let shade = (spec.ambient + (1.0 - spec.ambient) * lambert) * texture(spec, point);
    [
        (albedo[0] * shade).clamp(0.0, 1.0),
        (albedo[1] * shade).clamp(0.0, 1.0),
        (albedo[2] * shade).clamp(0.0, 1.0),
    ]
}

fn validate(rig: &CameraRig, spec: &SceneSpec) -> Result<(), SceneError> {
    if spec.trajectory.is_empty()
        || !(spec.ambient >= 0.0 && spec.ambient <= 1.0)
        || !(spec.texture_amp >= 0.0 && spec.texture_amp < 1.0)
    {
        return Err(SceneError::InvalidScene);
    }
    for pose in &spec.trajectory {
        // Planar trajectories only: rotation about world z.
        if (pose.rotation().m[2][2] - 1.0).abs() > 1e-9 {
            return Err(SceneError::InvalidScene);
        }
        for view in rig.views() {
            let c = pose.apply(view.center());
            if spec.ground.is_some() && c.z < CAMERA_CLEARANCE {
                return Err(SceneError::InvalidScene);
            }
            for obj in &spec.objects {
                let dist = match obj {
                    SceneObject::Sphere { center, radius, .. } => {
                        ((c - *center).norm() - radius).abs()
                    }
                    SceneObject::Box { center, size, yaw, .. } => {
                        let p = Mat3::rot_z(-yaw) * (c - *center);
                        let dx = (p.x.abs() - size.x / 2.0).max(0.0);
                        let dy = (p.y.abs() - size.y / 2.0).max(0.0);
                        let dz = (p.z.abs() - size.z / 2.0).max(0.0);
                        let outside = (dx * dx + dy * dy + dz * dz).sqrt();
                        if outside > 0.0 {
                            outside
                        } else {
                            // Inside a box: never allowed.
                            0.0
                        }
                    }
                };
                if dist < CAMERA_CLEARANCE {
                    return Err(SceneError::InvalidScene);
                }
            }
        }
    }
    Ok(())
}

fn render_view(spec: &SceneSpec, view: &CameraView, pose: &RigidTransform) -> (DepthMap, RgbImage) {
    let k = &view.intrinsics;
    let world = pose.compose(&view.extrinsics);
    let origin = world.translation();
    let mut depth = DepthMap::new(k.width, k.height);
    let mut image = RgbImage::new(k.width, k.height);
    for y in 0..k.height {
        for x in 0..k.width {
            // Camera-frame ray with unit z, so the hit parameter equals the
            // camera-frame depth of the surface point.
            let dir_cam = Vec3::new(
                (x as f64 - k.cx) / k.fx,
                (y as f64 - k.cy) / k.fy,
                1.0,
            );
            let dir = world.rotate(dir_cam);
            let hit = cast_ray(spec, origin, dir);
            match hit {
                Some(h) if spec.max_range.map_or(true, |m| h.t <= m) => {
                    let point = origin + dir * h.t;
                    depth.set(x, y, h.t);
                    image.set_pixel(x, y, shade(spec, point, h.normal, dir, h.albedo));
                }
                _ => image.set_pixel(x, y, spec.sky_rgb),
            }
        }
    }
    (depth, image)
}

fn pose_yaw(pose: &RigidTransform) -> f64 {
    pose.rotation().m[1][0].atan2(pose.rotation().m[0][0])
}

fn frame_boxes(spec: &SceneSpec, pose: &RigidTransform) -> Vec<Box3D> {
    let inv = pose.inverse();
    let yaw0 = pose_yaw(pose);
    spec.objects
        .iter()
        .filter_map(|obj| match obj {
            SceneObject::Box { center, size, yaw, annotate: true, .. } => {
                let c = inv.apply(*center);
                Box3D::new([c.x, c.y, c.z], [size.x, size.y, size.z], yaw - yaw0).ok()
            }
            _ => None,
        })
        .collect()
}

/// Renders every frame of the trajectory for every rig view.
pub fn render_scene(rig: &CameraRig, spec: &SceneSpec) -> Result<Vec<FrameBundle>, SceneError> {
    validate(rig, spec)?;
    Ok(spec
        .trajectory
        .iter()
        .map(|pose| {
            let mut depths = Vec::with_capacity(rig.views().len());
            let mut images = Vec::with_capacity(rig.views().len());
            for view in rig.views() {
                let (d, i) = render_view(spec, view, pose);
                depths.push(d);
                images.push(i);
            }
            FrameBundle { depths, images, boxes: frame_boxes(spec, pose) }
        })
        .collect())
}

/// Splits bundles into `[frame][view]` rasters for the loss API.
pub fn split_bundles(bundles: &[FrameBundle]) -> (Vec<Vec<DepthMap>>, Vec<Vec<RgbImage>>) {
    (
        bundles.iter().map(|b| b.depths.clone()).collect(),
        bundles.iter().map(|b| b.images.clone()).collect(),
    )
}

/// Source/target renders of the same scene under an extrinsic shift of the
/// rig. Ground truths are shared: the scene does not move, only the cameras.
#[derive(Debug, Clone)]
pub struct ShiftPair {
    pub source: Vec<FrameBundle>,
    pub target: Vec<FrameBundle>,
    pub target_rig: CameraRig,
}

pub fn make_shift_pair(
    rig: &CameraRig,
    spec: &SceneSpec,
    shift: &ShiftSpec,
) -> Result<ShiftPair, SceneError> {
    let target_rig = perturb_rig(rig, shift)?;
    Ok(ShiftPair {
        source: render_scene(rig, spec)?,
        target: render_scene(&target_rig, spec)?,
        target_rig,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftRow {
    pub shift: ShiftSpec,
    pub l_ov: f64,
    pub l_p: f64,
    pub ov_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftStudyReport {
    pub rows: Vec<ShiftRow>,
    /// Whether `l_ov` strictly increases across the rows in the given order.
    pub lov_strictly_increasing: bool,
}

/// Scores the unshifted render against renders under each shifted rig.
///
/// The warp and the source-side rasters assume the nominal (source)
/// mounting; the target-side rasters come from the physically shifted rig.
/// Consistency between two views is invariant to rigid motion of the whole
/// rig — translating every camera identically changes no relative transform
/// — so a pure within-render evaluation cannot see a height change at all.
/// What a mounting change does break is agreement between data collected
/// under the nominal rig and data collected under the shifted rig, and that
/// mismatch is what the study measures: it grows with the shift magnitude.
pub fn shift_study(
    rig: &CameraRig,
    spec: &SceneSpec,
    shifts: &[ShiftSpec],
    weights: &LossWeights,
    ssim: &SsimParams,
    temporal_window: usize,
) -> Result<ShiftStudyReport, SceneError> {
    weights.validate()?;
    ssim.validate()?;
    let pairs: Vec<PairKey> = enumerate_pairs(rig, spec.frames(), temporal_window);
    let source = render_scene(rig, spec)?;
    let mut rows = Vec::with_capacity(shifts.len());
    for shift in shifts {
        let shifted = perturb_rig(rig, shift)?;
        let target = render_scene(&shifted, spec)?;
        let mut ov_sum = 0.0;
        let mut ov_count = 0usize;
        let mut p_sum = 0.0;
        let mut p_count = 0usize;
        for key in &pairs {
            let src = posed_view(&rig.views()[key.src_view], &spec.trajectory[key.src_frame]);
            let dst = posed_view(&rig.views()[key.dst_view], &spec.trajectory[key.dst_frame]);
            let field = warp_depth(&src, &dst, &source[key.src_frame].depths[key.src_view])
                .map_err(|_| SceneError::Consist(ConsistError::DimensionMismatch))?;
            let (l_ov, n_ov) =
                consist::overlap_depth_loss(&field, &target[key.dst_frame].depths[key.dst_view])?;
            ov_sum += l_ov * n_ov as f64;
            ov_count += n_ov;
            let (l_p, n_p) = consist::photometric_loss(
                &field,
                &source[key.src_frame].images[key.src_view],
                &target[key.dst_frame].images[key.dst_view],
                ssim,
            )?;
            p_sum += l_p * n_p as f64;
            p_count += n_p;
        }
        rows.push(ShiftRow {
            shift: *shift,
            l_ov: if ov_count > 0 { ov_sum / ov_count as f64 } else { 0.0 },
            l_p: if p_count > 0 { p_sum / p_count as f64 } else { 0.0 },
            ov_count,
        });
    }
    let lov_strictly_increasing = rows.windows(2).all(|w| w[0].l_ov < w[1].l_ov);
    Ok(ShiftStudyReport { rows, lov_strictly_increasing })
}
