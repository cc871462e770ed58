//! Synthetic bundle directories: per-view rasters plus per-frame box files
//! and the ego trajectory, as written by `mvgc synth` and read back by the
//! `consist` commands.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use mvgc_core::camgeom::CameraRig;
use mvgc_core::geom::RigidTransform;
use mvgc_core::raster::{DepthMap, RgbImage};
use mvgc_core::synthrig::{render_scene, FrameBundle, SceneSpec};

use crate::formats::{self, write_json_pretty, PoseJson};
use crate::pfm;

/// Number of worker threads: `MVGC_THREADS` if set, else the machine's
/// available parallelism.
pub fn thread_cap() -> usize {
    std::env::var("MVGC_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Renders the trajectory frames in parallel, capped by [`thread_cap`].
/// Rendering is pure per frame, so the result is identical to the serial
/// render regardless of scheduling.
pub fn render_scene_parallel(rig: &CameraRig, spec: &SceneSpec) -> Result<Vec<FrameBundle>> {
    let frames = spec.frames();
    let workers = thread_cap().min(frames.max(1));
    if workers <= 1 || frames <= 1 {
        return render_scene(rig, spec).map_err(|e| anyhow::anyhow!("{e}"));
    }
    // Frames are dealt round-robin to workers; each worker renders its
    // frames through single-pose sub-specs, and results are reassembled in
    // frame order.
    let rendered: Vec<Result<Vec<(usize, FrameBundle)>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || {
                    let mut part = Vec::new();
                    for f in (w..frames).step_by(workers) {
                        let mut sub = spec.clone();
                        sub.trajectory = vec![spec.trajectory[f].clone()];
                        let mut frame = render_scene(rig, &sub)
                            .map_err(|e| anyhow::anyhow!("frame {f}: {e}"))?;
                        part.push((f, frame.remove(0)));
                    }
                    Ok(part)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("render worker panicked")).collect()
    });
    let mut slots: Vec<Option<FrameBundle>> = Vec::new();
    slots.resize_with(frames, || None);
    for part in rendered {
        for (f, bundle) in part? {
            slots[f] = Some(bundle);
        }
    }
    Ok(slots.into_iter().map(|s| s.expect("every frame rendered")).collect())
}

fn raster_stem(frame: usize, view_id: &str) -> String {
    format!("f{frame}_{view_id}")
}

/// Writes one bundle directory: depth PFM + mask PGM + image PPM per view
/// and frame, `f{frame}_boxes.json` per frame, and `trajectory.json`.
pub fn write_bundle_dir(
    dir: &Path,
    rig: &CameraRig,
    trajectory: &[RigidTransform],
    bundles: &[FrameBundle],
) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (f, bundle) in bundles.iter().enumerate() {
        for (v, view) in rig.views().iter().enumerate() {
            let stem = raster_stem(f, &view.id);
            pfm::write_pfm(&dir.join(format!("{stem}.depth.pfm")), &bundle.depths[v])?;
            pfm::write_mask_pgm(&dir.join(format!("{stem}.mask.pgm")), &bundle.depths[v])?;
            pfm::write_ppm(&dir.join(format!("{stem}.rgb.ppm")), &bundle.images[v])?;
        }
        write_json_pretty(
            &dir.join(format!("f{f}_boxes.json")),
            &formats::boxes_to_json(&bundle.boxes),
        )?;
    }
    let poses: Vec<PoseJson> = trajectory
        .iter()
        .map(|p| {
            let t = p.translation();
            PoseJson { rotation: p.rotation().to_row_major(), translation: [t.x, t.y, t.z] }
        })
        .collect();
    write_json_pretty(&dir.join("trajectory.json"), &poses)
}

/// Rasters and trajectory of a bundle directory, `[frame][view]` layout.
pub struct LoadedBundle {
    pub depths: Vec<Vec<DepthMap>>,
    pub images: Vec<Vec<RgbImage>>,
    pub trajectory: Vec<RigidTransform>,
}

pub fn read_bundle_dir(dir: &Path, rig: &CameraRig) -> Result<LoadedBundle> {
    let traj_path = dir.join("trajectory.json");
    let text = fs::read_to_string(&traj_path)
        .with_context(|| format!("reading {}", traj_path.display()))?;
    let poses: Vec<PoseJson> =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", traj_path.display()))?;
    if poses.is_empty() {
        bail!("bundle has no frames");
    }
    let trajectory = poses
        .iter()
        .map(|p| {
            RigidTransform::new(
                mvgc_core::geom::Mat3::from_row_major(&p.rotation),
                mvgc_core::geom::Vec3::new(p.translation[0], p.translation[1], p.translation[2]),
            )
            .map_err(|e| anyhow::anyhow!("{e}"))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut depths = Vec::with_capacity(trajectory.len());
    let mut images = Vec::with_capacity(trajectory.len());
    for f in 0..trajectory.len() {
        let mut frame_depths = Vec::with_capacity(rig.views().len());
        let mut frame_images = Vec::with_capacity(rig.views().len());
        for view in rig.views() {
            let stem = raster_stem(f, &view.id);
            frame_depths.push(pfm::read_pfm_with_mask(
                &dir.join(format!("{stem}.depth.pfm")),
                &dir.join(format!("{stem}.mask.pgm")),
            )?);
            frame_images.push(pfm::read_ppm(&dir.join(format!("{stem}.rgb.ppm")))?);
        }
        depths.push(frame_depths);
        images.push(frame_images);
    }
    Ok(LoadedBundle { depths, images, trajectory })
}

#[cfg(test)]
mod tests {
    use super::*;
    use mvgc_core::camgeom::{make_preset_rig, RigPreset};

    #[test]
    fn bundle_round_trips_through_disk() {
        let rig = make_preset_rig(RigPreset::Mono1);
        let spec = SceneSpec::sphere_room(3, 2);
        let bundles = render_scene(&rig, &spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_bundle_dir(dir.path(), &rig, &spec.trajectory, &bundles).unwrap();
        let loaded = read_bundle_dir(dir.path(), &rig).unwrap();
        assert_eq!(loaded.trajectory.len(), 2);
        assert_eq!(loaded.depths[0][0].valid, bundles[0].depths[0].valid);
        for (a, b) in loaded.depths[1][0].values.iter().zip(&bundles[1].depths[0].values) {
            // f32 storage round-off only.
            assert!((a - b).abs() <= b.abs() * 1e-6);
        }
    }

    #[test]
    fn parallel_render_matches_serial() {
        let rig = make_preset_rig(RigPreset::Mono1);
        let spec = SceneSpec::yard(5, 3);
        let serial = render_scene(&rig, &spec).unwrap();
        let parallel = render_scene_parallel(&rig, &spec).unwrap();
        assert_eq!(serial.len(), parallel.len());
        for (a, b) in serial.iter().zip(&parallel) {
            assert_eq!(a.depths, b.depths);
            assert_eq!(a.images, b.images);
            assert_eq!(a.boxes, b.boxes);
        }
    }
}
