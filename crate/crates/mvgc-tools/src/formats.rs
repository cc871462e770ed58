//! JSON schemas for rigs, scenes, boxes and reports, with conversions to
//! and from the core types.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use mvgc_core::camgeom::{CameraIntrinsics, CameraRig, CameraView};
use mvgc_core::consist::{FdReport, LossReport};
use mvgc_core::evalkit::{Box3D, MetricBundle};
use mvgc_core::geom::{Mat3, RigidTransform, Vec3};
use mvgc_core::synthrig::{SceneObject, SceneSpec, ShiftRow, ShiftStudyReport};
use serde::{Deserialize, Serialize};

#[derive(Debug, Serialize, Deserialize)]
pub struct ViewJson {
    pub id: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Camera-to-ego rotation, row-major.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RigJson {
    pub views: Vec<ViewJson>,
    pub adjacency: Vec<(String, String)>,
}

pub fn rig_to_json(rig: &CameraRig) -> RigJson {
    RigJson {
        views: rig
            .views()
            .iter()
            .map(|v| ViewJson {
                id: v.id.clone(),
                fx: v.intrinsics.fx,
                fy: v.intrinsics.fy,
                cx: v.intrinsics.cx,
                cy: v.intrinsics.cy,
                width: v.intrinsics.width,
                height: v.intrinsics.height,
                rotation: v.extrinsics.rotation().to_row_major(),
                translation: {
                    let t = v.extrinsics.translation();
                    [t.x, t.y, t.z]
                },
            })
            .collect(),
        adjacency: rig.adjacency().to_vec(),
    }
}

pub fn rig_from_json(j: &RigJson) -> Result<CameraRig> {
    let views = j
        .views
        .iter()
        .map(|v| {
            let intrinsics = CameraIntrinsics::new(v.fx, v.fy, v.cx, v.cy, v.width, v.height)
                .map_err(|e| anyhow!("view {}: {e}", v.id))?;
            let extrinsics = RigidTransform::new(
                Mat3::from_row_major(&v.rotation),
                Vec3::new(v.translation[0], v.translation[1], v.translation[2]),
            )
            .map_err(|e| anyhow!("view {}: {e}", v.id))?;
            Ok(CameraView { id: v.id.clone(), intrinsics, extrinsics })
        })
        .collect::<Result<Vec<_>>>()?;
    CameraRig::new(views, j.adjacency.clone()).map_err(|e| anyhow!("{e}"))
}

pub fn load_rig(path: &Path) -> Result<CameraRig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let j: RigJson =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    rig_from_json(&j)
}

pub fn save_rig(path: &Path, rig: &CameraRig) -> Result<()> {
    write_json_pretty(path, &rig_to_json(rig))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PoseJson {
    /// Row-major rotation matrix.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

fn pose_to_json(p: &RigidTransform) -> PoseJson {
    let t = p.translation();
    PoseJson { rotation: p.rotation().to_row_major(), translation: [t.x, t.y, t.z] }
}

fn pose_from_json(p: &PoseJson) -> Result<RigidTransform> {
    RigidTransform::new(
        Mat3::from_row_major(&p.rotation),
        Vec3::new(p.translation[0], p.translation[1], p.translation[2]),
    )
    .map_err(|e| anyhow!("{e}"))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObjectJson {
    Box {
        center: [f64; 3],
        size: [f64; 3],
        yaw: f64,
        albedo: [f64; 3],
        annotate: bool,
    },
    Sphere {
        center: [f64; 3],
        radius: f64,
        albedo: [f64; 3],
    },
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SceneJson {
    pub seed: u64,
    pub ground: Option<[f64; 3]>,
    pub objects: Vec<ObjectJson>,
    /// Per-frame ego-to-world pose; rotations must be about world z.
    pub trajectory: Vec<PoseJson>,
    pub light_dir: [f64; 3],
    pub ambient: f64,
    pub texture_amp: f64,
    pub texture_freq: f64,
    pub texture_phase: [f64; 3],
    pub max_range: Option<f64>,
    pub sky_rgb: [f64; 3],
}

fn v3(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

pub fn scene_to_json(s: &SceneSpec) -> SceneJson {
    SceneJson {
        seed: s.seed,
        ground: s.ground,
        objects: s
            .objects
            .iter()
            .map(|o| match o {
                SceneObject::Box { center, size, yaw, albedo, annotate } => ObjectJson::Box {
                    center: [center.x, center.y, center.z],
                    size: [size.x, size.y, size.z],
                    yaw: *yaw,
                    albedo: *albedo,
                    annotate: *annotate,
                },
                SceneObject::Sphere { center, radius, albedo } => ObjectJson::Sphere {
                    center: [center.x, center.y, center.z],
                    radius: *radius,
                    albedo: *albedo,
                },
            })
            .collect(),
        trajectory: s.trajectory.iter().map(pose_to_json).collect(),
        light_dir: [s.light_dir.x, s.light_dir.y, s.light_dir.z],
        ambient: s.ambient,
        texture_amp: s.texture_amp,
        texture_freq: s.texture_freq,
        texture_phase: s.texture_phase,
        max_range: s.max_range,
        sky_rgb: s.sky_rgb,
    }
}

pub fn scene_from_json(j: &SceneJson) -> Result<SceneSpec> {
    Ok(SceneSpec {
        seed: j.seed,
        ground: j.ground,
        objects: j
            .objects
            .iter()
            .map(|o| match o {
                ObjectJson::Box { center, size, yaw, albedo, annotate } => SceneObject::Box {
                    center: v3(*center),
                    size: v3(*size),
                    yaw: *yaw,
                    albedo: *albedo,
                    annotate: *annotate,
                },
                ObjectJson::Sphere { center, radius, albedo } => SceneObject::Sphere {
                    center: v3(*center),
                    radius: *radius,
                    albedo: *albedo,
                },
            })
            .collect(),
        trajectory: j.trajectory.iter().map(pose_from_json).collect::<Result<_>>()?,
        light_dir: v3(j.light_dir).normalized(),
        ambient: j.ambient,
        texture_amp: j.texture_amp,
        texture_freq: j.texture_freq,
        texture_phase: j.texture_phase,
        max_range: j.max_range,
        sky_rgb: j.sky_rgb,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoxJson {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub yaw: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
}

pub fn boxes_to_json(boxes: &[Box3D]) -> Vec<BoxJson> {
    boxes
        .iter()
        .map(|b| BoxJson {
            cx: b.cx,
            cy: b.cy,
            cz: b.cz,
            l: b.l,
            w: b.w,
            h: b.h,
            yaw: b.yaw,
            score: Some(b.score),
            class: Some(b.class.clone()),
        })
        .collect()
}

pub fn boxes_from_json(list: &[BoxJson]) -> Result<Vec<Box3D>> {
    list.iter()
        .map(|j| {
            let mut b = Box3D::new([j.cx, j.cy, j.cz], [j.l, j.w, j.h], j.yaw)
                .map_err(|e| anyhow!("{e}"))?;
            if let Some(s) = j.score {
                if !(0.0..=1.0).contains(&s) {
                    bail!("score {s} outside [0, 1]");
                }
                b = b.with_score(s);
            }
            if let Some(c) = &j.class {
                b.class = c.clone().into();
            }
            Ok(b)
        })
        .collect()
}

pub fn load_boxes(path: &Path) -> Result<Vec<Box3D>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let list: Vec<BoxJson> =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    boxes_from_json(&list)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PairLossJson {
    pub src_view: usize,
    pub dst_view: usize,
    pub src_frame: usize,
    pub dst_frame: usize,
    pub l_ov: f64,
    pub ov_count: usize,
    pub l_p: f64,
    pub p_count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LossReportJson {
    pub l_det: f64,
    pub l_ov: f64,
    pub l_p: f64,
    pub l_total: f64,
    pub total_ov_count: usize,
    pub total_p_count: usize,
    pub per_pair: Vec<PairLossJson>,
}

pub fn loss_report_to_json(r: &LossReport) -> LossReportJson {
    LossReportJson {
        l_det: r.l_det,
        l_ov: r.l_ov,
        l_p: r.l_p,
        l_total: r.l_total,
        total_ov_count: r.total_ov_count,
        total_p_count: r.total_p_count,
        per_pair: r
            .per_pair
            .iter()
            .map(|p| PairLossJson {
                src_view: p.key.src_view,
                dst_view: p.key.dst_view,
                src_frame: p.key.src_frame,
                dst_frame: p.key.dst_frame,
                l_ov: p.l_ov,
                ov_count: p.ov_count,
                l_p: p.l_p,
                p_count: p.p_count,
            })
            .collect(),
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FdReportJson {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub epsilon: f64,
    pub threshold: f64,
    pub passed: bool,
}

pub fn fd_report_to_json(r: &FdReport, epsilon: f64, threshold: f64) -> FdReportJson {
    FdReportJson {
        checked: r.checked,
        skipped: r.skipped,
        max_rel_err: r.max_rel_err,
        mean_rel_err: r.mean_rel_err,
        epsilon,
        threshold,
        passed: r.max_rel_err < threshold,
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MetricBundleJson {
    pub map: f64,
    pub mate: f64,
    pub mase: f64,
    pub maoe: f64,
    pub nds: f64,
}

impl From<&MetricBundle> for MetricBundleJson {
    fn from(m: &MetricBundle) -> Self {
        MetricBundleJson { map: m.map, mate: m.mate, mase: m.mase, maoe: m.maoe, nds: m.nds }
    }
}

/// CSV rendering of a shift study: one row per shift with the loss columns.
pub fn shift_study_csv(report: &ShiftStudyReport) -> String {
    let mut out = String::from(
        "# extrinsic shift study: losses of shifted renders scored with unshifted geometry\n",
    );
    out.push_str("mode,dx,dy,dz,dpitch,dyaw,l_ov,l_p,ov_count\n");
    for ShiftRow { shift, l_ov, l_p, ov_count } in &report.rows {
        out.push_str(&format!(
            "{:?},{},{},{},{},{},{:.9},{:.9},{}\n",
            shift.mode, shift.dx, shift.dy, shift.dz, shift.dpitch, shift.dyaw, l_ov, l_p, ov_count
        ));
    }
    out
}

pub fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
