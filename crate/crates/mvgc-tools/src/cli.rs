//! The `mvgc` command-line surface.
//!
//! Exit codes: 0 on success, 2 on usage or input errors, 3 when an asserted
//! numeric or structural property fails.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mvgc_core::adapter::{
    leda_demo, param_count, ActKind, AdapterSpec, FeatureMap, LayerKind, NormKind,
};
use mvgc_core::camgeom::{make_preset_rig, perturb_rig, RigPreset, ShiftMode, ShiftSpec};
use mvgc_core::consist::{
    evaluate_scene, finite_difference_check, FdOptions, FdReport, FdSample, LossWeights,
    SsimParams,
};
use mvgc_core::evalkit::{closed_gap, match_and_score, nds_star, EvalConfig};
use mvgc_core::synthrig::{shift_study, SceneSpec, ShiftStudyReport};
use mvgc_core::warp::enumerate_pairs;

use crate::bundle::{self, read_bundle_dir, render_scene_parallel, write_bundle_dir};
use crate::formats::{
    self, fd_report_to_json, load_boxes, load_rig, loss_report_to_json, save_rig, scene_from_json,
    shift_study_csv, write_json_pretty, MetricBundleJson, SceneJson,
};
use crate::manifest::{write_manifest_for, ManifestBuilder};

/// An asserted property did not hold; mapped to exit code 3.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct PropertyFailure(pub String);

#[derive(Parser)]
#[command(
    name = "mvgc",
    version,
    about = "Multi-view geometric consistency toolkit: synthetic rigs, \
             depth/photometric losses, adapters and detection metrics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create or perturb camera rig files.
    Rig {
        #[command(subcommand)]
        command: RigCommand,
    },
    /// Render a synthetic scene into a bundle directory.
    Synth(SynthArgs),
    /// Depth/photometric consistency losses and their validation.
    Consist {
        #[command(subcommand)]
        command: ConsistCommand,
    },
    /// Adapter parameter accounting and the adaptation demo.
    Adapter {
        #[command(subcommand)]
        command: AdapterCommand,
    },
    /// Detection metrics: NDS*, Closed Gap, box matching.
    Metrics {
        #[command(subcommand)]
        command: MetricsCommand,
    },
}

#[derive(Subcommand)]
enum RigCommand {
    /// Write a preset rig to a JSON file.
    Gen {
        /// Preset name: nuscenes6, front3 or mono1.
        #[arg(long)]
        preset: String,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Apply an extrinsic mounting shift to a rig file.
    Perturb(PerturbArgs),
}

#[derive(Args)]
struct PerturbArgs {
    /// Shift mode: height, pitch, all or custom.
    #[arg(long)]
    mode: String,
    /// Forward translation, meters.
    #[arg(long, default_value_t = 0.0)]
    dx: f64,
    /// Lateral translation, meters (side-signed in mode "all").
    #[arg(long, default_value_t = 0.0)]
    dy: f64,
    /// Vertical translation, meters.
    #[arg(long, default_value_t = 0.0)]
    dz: f64,
    /// Pitch toward the ground, degrees.
    #[arg(long = "dpitch-deg", default_value_t = 0.0)]
    dpitch_deg: f64,
    /// Yaw toward the camera's right, degrees (side-signed in mode "all").
    #[arg(long = "dyaw-deg", default_value_t = 0.0)]
    dyaw_deg: f64,
    #[arg(short, long)]
    input: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct SceneArgs {
    /// Named scene ("sphere-room", "yard") or a scene-spec JSON file.
    #[arg(long, default_value = "sphere-room")]
    scene: String,
    /// Scene seed (named scenes only).
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Trajectory length in frames (named scenes only).
    #[arg(long, default_value_t = 2)]
    frames: usize,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    rig: PathBuf,
    #[command(flatten)]
    scene: SceneArgs,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct LossArgs {
    #[arg(long, default_value_t = 1.0)]
    lambda_det: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_ov: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_p: f64,
    /// Externally supplied detection loss term.
    #[arg(long, default_value_t = 0.0)]
    l_det: f64,
    /// Temporal pairing window, frames.
    #[arg(long, default_value_t = 1)]
    temporal_window: usize,
}

#[derive(Subcommand)]
enum ConsistCommand {
    /// Evaluate the consistency losses of a rendered bundle directory.
    Eval {
        #[arg(long)]
        rig: PathBuf,
        /// Bundle directory written by `mvgc synth`.
        #[arg(short, long)]
        input: PathBuf,
        #[command(flatten)]
        loss: LossArgs,
        /// Optional JSON report file (the report always prints to stdout).
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Check the analytic depth gradient against finite differences.
    Gradcheck {
        #[arg(long)]
        rig: PathBuf,
        #[command(flatten)]
        scene: SceneArgs,
        #[command(flatten)]
        loss: LossArgs,
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        /// Multiplicative depth bias probing the loss away from its zero.
        #[arg(long, default_value_t = 1.05)]
        depth_scale: f64,
        /// Maximum allowed relative error.
        #[arg(long, default_value_t = 1e-4)]
        threshold: f64,
        #[arg(long, default_value_t = 0)]
        fd_seed: u64,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Loss growth under extrinsic mounting shifts, as CSV.
    ShiftStudy {
        #[arg(long)]
        rig: PathBuf,
        #[command(flatten)]
        scene: SceneArgs,
        #[command(flatten)]
        loss: LossArgs,
        /// Comma-separated height shifts, meters, ascending from 0.
        #[arg(long, default_value = "0,0.2,0.65")]
        dz: String,
        /// Additional pitch shift, degrees.
        #[arg(long, default_value_t = 5.0)]
        pitch_deg: f64,
        #[arg(short, long)]
        output: PathBuf,
    },
}

#[derive(Subcommand)]
enum AdapterCommand {
    /// Parameter counts of the adapter structure family.
    Bench {
        /// Channel count.
        #[arg(long, default_value_t = 64)]
        c: usize,
        /// Spatial compression ratio.
        #[arg(long, default_value_t = 4)]
        r: usize,
        /// Conv kernel side, odd.
        #[arg(long, default_value_t = 3)]
        k: usize,
        /// Feature raster height and width.
        #[arg(long, default_value_t = 8)]
        size: usize,
    },
    /// Label-efficient adaptation demo on an affine-shifted target task.
    Demo {
        /// Fraction of target samples with labels, in (0, 1].
        #[arg(long)]
        k_percent: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 250)]
        steps: usize,
        #[arg(long, default_value_t = 0.3)]
        lr: f64,
        /// Target = scale * source + offset.
        #[arg(long, default_value_t = 1.2)]
        shift_scale: f64,
        #[arg(long, default_value_t = 0.8)]
        shift_offset: f64,
    },
}

#[derive(Subcommand)]
enum MetricsCommand {
    /// Aggregate detection score from its components.
    Nds {
        #[arg(long)]
        map: f64,
        #[arg(long)]
        mate: f64,
        #[arg(long)]
        mase: f64,
        #[arg(long)]
        maoe: f64,
    },
    /// Fraction of the oracle-to-baseline gap closed by a model.
    ClosedGap {
        #[arg(long)]
        model: f64,
        #[arg(long)]
        dt: f64,
        #[arg(long)]
        oracle: f64,
    },
    /// Match prediction and ground-truth box files and score them.
    Match {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        gts: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.exit_code() == 0 { 0 } else { 2 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err:#}");
            if err.is::<PropertyFailure>() {
                3
            } else {
                2
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Rig { command } => match command {
            RigCommand::Gen { preset, output } => cmd_rig_gen(&preset, &output),
            RigCommand::Perturb(args) => cmd_rig_perturb(&args),
        },
        Command::Synth(args) => cmd_synth(&args),
        Command::Consist { command } => match command {
            ConsistCommand::Eval { rig, input, loss, output } => {
                cmd_consist_eval(&rig, &input, &loss, output.as_deref())
            }
            ConsistCommand::Gradcheck {
                rig,
                scene,
                loss,
                eps,
                samples,
                depth_scale,
                threshold,
                fd_seed,
                output,
            } => cmd_gradcheck(
                &rig,
                &scene,
                &loss,
                eps,
                samples,
                depth_scale,
                threshold,
                fd_seed,
                output.as_deref(),
            ),
            ConsistCommand::ShiftStudy { rig, scene, loss, dz, pitch_deg, output } => {
                cmd_shift_study(&rig, &scene, &loss, &dz, pitch_deg, &output)
            }
        },
        Command::Adapter { command } => match command {
            AdapterCommand::Bench { c, r, k, size } => cmd_adapter_bench(c, r, k, size),
            AdapterCommand::Demo { k_percent, seed, steps, lr, shift_scale, shift_offset } => {
                cmd_adapter_demo(k_percent, seed, steps, lr, shift_scale, shift_offset)
            }
        },
        Command::Metrics { command } => match command {
            MetricsCommand::Nds { map, mate, mase, maoe } => {
                let nds = nds_star(map, mate, mase, maoe).map_err(|e| anyhow!("{e}"))?;
                println!("NDS* = {nds:.3}");
                Ok(())
            }
            MetricsCommand::ClosedGap { model, dt, oracle } => {
                let gap = closed_gap(model, dt, oracle).map_err(|e| anyhow!("{e}"))?;
                println!("Closed Gap = {gap:+.1}%");
                Ok(())
            }
            MetricsCommand::Match { preds, gts, output } => {
                cmd_metrics_match(&preds, &gts, output.as_deref())
            }
        },
    }
}

fn loss_weights(loss: &LossArgs) -> Result<LossWeights> {
    let w = LossWeights {
        lambda_det: loss.lambda_det,
        lambda_ov: loss.lambda_ov,
        lambda_p: loss.lambda_p,
    };
    w.validate().map_err(|e| anyhow!("{e}"))?;
    Ok(w)
}

/// Resolves `--scene`: a known name builds the seeded spec, anything else
/// is read as a scene-spec JSON file.
fn resolve_scene(args: &SceneArgs) -> Result<SceneSpec> {
    if args.frames == 0 {
        bail!("--frames must be at least 1");
    }
    match args.scene.as_str() {
        "sphere-room" => Ok(SceneSpec::sphere_room(args.seed, args.frames)),
        "yard" => Ok(SceneSpec::yard(args.seed, args.frames)),
        other => {
            let path = Path::new(other);
            if path.extension().is_some_and(|e| e == "json") {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                let j: SceneJson = serde_json::from_str(&text)
                    .with_context(|| format!("parsing {}", path.display()))?;
                scene_from_json(&j)
            } else {
                bail!("unknown scene {other:?} (known: sphere-room, yard, or a .json spec file)")
            }
        }
    }
}

fn cmd_rig_gen(preset: &str, output: &Path) -> Result<()> {
    let preset = RigPreset::from_name(preset).map_err(|e| anyhow!("{e}"))?;
    let rig = make_preset_rig(preset);
    save_rig(output, &rig)?;
    let manifest = ManifestBuilder::new("rig gen").finish();
    write_manifest_for(output, &manifest)?;
    println!("wrote {} ({} views)", output.display(), rig.views().len());
    Ok(())
}

fn cmd_rig_perturb(args: &PerturbArgs) -> Result<()> {
    let mode = match args.mode.as_str() {
        "height" => ShiftMode::Height,
        "pitch" => ShiftMode::Pitch,
        "all" => ShiftMode::All,
        "custom" => ShiftMode::Custom,
        other => bail!("unknown shift mode {other:?} (known: height, pitch, all, custom)"),
    };
    let shift = ShiftSpec {
        mode,
        dx: args.dx,
        dy: args.dy,
        dz: args.dz,
        dpitch: args.dpitch_deg.to_radians(),
        dyaw: args.dyaw_deg.to_radians(),
    };
    let mut manifest = ManifestBuilder::new("rig perturb");
    manifest.input(&args.input)?;
    let rig = load_rig(&args.input)?;
    let shifted = perturb_rig(&rig, &shift).map_err(|e| anyhow!("{e}"))?;
    save_rig(&args.output, &shifted)?;
    write_manifest_for(&args.output, &manifest.finish())?;
    println!("wrote {}", args.output.display());
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::new("synth").seed(args.scene.seed);
    manifest.input(&args.rig)?;
    let rig = load_rig(&args.rig)?;
    let spec = resolve_scene(&args.scene)?;
    let bundles = render_scene_parallel(&rig, &spec)?;
    write_bundle_dir(&args.output, &rig, &spec.trajectory, &bundles)?;
    write_json_pretty(&args.output.join("scene.json"), &formats::scene_to_json(&spec))?;
    write_manifest_for(&args.output, &manifest.finish())?;
    println!(
        "wrote {} frames x {} views to {}",
        bundles.len(),
        rig.views().len(),
        args.output.display()
    );
    Ok(())
}

fn cmd_consist_eval(
    rig_path: &Path,
    input: &Path,
    loss: &LossArgs,
    output: Option<&Path>,
) -> Result<()> {
    let mut manifest = ManifestBuilder::new("consist eval");
    manifest.input(rig_path)?;
    let rig = load_rig(rig_path)?;
    let loaded = read_bundle_dir(input, &rig)?;
    let weights = loss_weights(loss)?;
    let pairs = enumerate_pairs(&rig, loaded.trajectory.len(), loss.temporal_window);
    let report = evaluate_scene(
        &rig,
        &loaded.trajectory,
        &loaded.depths,
        &loaded.images,
        &pairs,
        &weights,
        &SsimParams::default(),
        loss.l_det,
    )
    .map_err(|e| anyhow!("{e}"))?;
    let json = loss_report_to_json(&report);
    println!("{}", serde_json::to_string_pretty(&json)?);
    if let Some(path) = output {
        write_json_pretty(path, &json)?;
        write_manifest_for(path, &manifest.finish())?;
    }
    Ok(())
}

/// Runs the finite-difference check as a fixed set of seeded chunks mapped
/// onto worker threads. The chunking is independent of the thread count, so
/// the merged report depends only on flags and seed.
pub fn parallel_fd_check(
    rig: &mvgc_core::camgeom::CameraRig,
    ego: &[mvgc_core::geom::RigidTransform],
    depths: &[Vec<mvgc_core::raster::DepthMap>],
    images: &[Vec<mvgc_core::raster::RgbImage>],
    pairs: &[mvgc_core::warp::PairKey],
    weights: &LossWeights,
    ssim: &SsimParams,
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<FdReport> {
    const CHUNKS: usize = 8;
    let per = samples.div_ceil(CHUNKS);
    let workers = bundle::thread_cap().min(CHUNKS);
    // Chunks are dealt round-robin to the workers; the chunk layout (and so
    // the sampled pixels) is fixed regardless of the worker count.
    let results: Vec<Result<Vec<(usize, FdReport)>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || {
                    let mut part = Vec::new();
                    for chunk in (w..CHUNKS).step_by(workers) {
                        let want = per.min(samples.saturating_sub(chunk * per));
                        if want == 0 {
                            continue;
                        }
                        let opts =
                            FdOptions { epsilon: eps, samples: want, seed: seed + chunk as u64 };
                        let report = finite_difference_check(
                            rig, ego, depths, images, pairs, weights, ssim, &opts,
                        )
                        .map_err(|e| anyhow!("{e}"))?;
                        part.push((chunk, report));
                    }
                    Ok(part)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("fd worker panicked")).collect()
    });
    let mut reports: Vec<(usize, FdReport)> = Vec::new();
    for part in results {
        reports.extend(part?);
    }
    reports.sort_by_key(|(chunk, _)| *chunk);
    let mut samples_all: Vec<FdSample> = Vec::new();
    let mut skipped = 0;
    for (_, r) in reports {
        skipped += r.skipped;
        samples_all.extend(r.samples);
    }
    if samples_all.is_empty() {
        bail!("no comparable pixels found");
    }
    let max_rel_err = samples_all.iter().map(|s| s.rel_err).fold(0.0, f64::max);
    let mean_rel_err =
        samples_all.iter().map(|s| s.rel_err).sum::<f64>() / samples_all.len() as f64;
    Ok(FdReport {
        checked: samples_all.len(),
        samples: samples_all,
        max_rel_err,
        mean_rel_err,
        skipped,
    })
}

#[allow(clippy::too_many_arguments)]
fn cmd_gradcheck(
    rig_path: &Path,
    scene: &SceneArgs,
    loss: &LossArgs,
    eps: f64,
    samples: usize,
    depth_scale: f64,
    threshold: f64,
    fd_seed: u64,
    output: Option<&Path>,
) -> Result<()> {
    if samples == 0 {
        bail!("--samples must be at least 1");
    }
    if !(depth_scale > 0.0) || !(eps > 0.0) || !(threshold > 0.0) {
        bail!("--depth-scale, --eps and --threshold must be positive");
    }
    let mut manifest = ManifestBuilder::new("consist gradcheck").seed(scene.seed);
    manifest.input(rig_path)?;
    let rig = load_rig(rig_path)?;
    let spec = resolve_scene(scene)?;
    let bundles = render_scene_parallel(&rig, &spec)?;
    let (mut depths, images) = mvgc_core::synthrig::split_bundles(&bundles);
    for frame in &mut depths {
        for d in frame {
            for v in &mut d.values {
                *v *= depth_scale;
            }
        }
    }
    let weights = loss_weights(loss)?;
    let pairs = enumerate_pairs(&rig, spec.frames(), loss.temporal_window);
    let report = parallel_fd_check(
        &rig,
        &spec.trajectory,
        &depths,
        &images,
        &pairs,
        &weights,
        &SsimParams::default(),
        eps,
        samples,
        fd_seed,
    )?;
    let json = fd_report_to_json(&report, eps, threshold);
    println!("{}", serde_json::to_string_pretty(&json)?);
    if let Some(path) = output {
        write_json_pretty(path, &json)?;
        write_manifest_for(path, &manifest.finish())?;
    }
    if !json.passed {
        return Err(PropertyFailure(format!(
            "max relative error {:.3e} is not below {threshold:.1e}",
            report.max_rel_err
        ))
        .into());
    }
    Ok(())
}

fn cmd_shift_study(
    rig_path: &Path,
    scene: &SceneArgs,
    loss: &LossArgs,
    dz_list: &str,
    pitch_deg: f64,
    output: &Path,
) -> Result<()> {
    let dz: Vec<f64> = dz_list
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| anyhow!("bad --dz entry {t:?}")))
        .collect::<Result<_>>()?;
    if dz.is_empty() || dz[0] != 0.0 {
        bail!("--dz must start with the zero shift");
    }
    let mut manifest = ManifestBuilder::new("consist shift-study").seed(scene.seed);
    manifest.input(rig_path)?;
    let rig = load_rig(rig_path)?;
    let spec = resolve_scene(scene)?;
    let weights = loss_weights(loss)?;
    let ssim = SsimParams::default();
    let height_shifts: Vec<ShiftSpec> = dz.iter().map(|d| ShiftSpec::height(*d)).collect();
    let height_report = shift_study(&rig, &spec, &height_shifts, &weights, &ssim, loss.temporal_window)
        .map_err(|e| anyhow!("{e}"))?;
    let pitch_report = shift_study(
        &rig,
        &spec,
        &[ShiftSpec::pitch(pitch_deg.to_radians())],
        &weights,
        &ssim,
        loss.temporal_window,
    )
    .map_err(|e| anyhow!("{e}"))?;
    let monotone = height_report.lov_strictly_increasing;
    let pitch_exceeds = pitch_report.rows[0].l_ov > height_report.rows[0].l_ov;
    let mut combined = ShiftStudyReport {
        rows: height_report.rows,
        lov_strictly_increasing: monotone,
    };
    combined.rows.extend(pitch_report.rows);
    let mut csv = shift_study_csv(&combined);
    csv.push_str(&format!("# monotone: {monotone}\n# pitch exceeds baseline: {pitch_exceeds}\n"));
    std::fs::write(output, &csv).with_context(|| format!("writing {}", output.display()))?;
    write_manifest_for(output, &manifest.finish())?;
    println!("monotone: {monotone}");
    println!("pitch exceeds baseline: {pitch_exceeds}");
    if !(monotone && pitch_exceeds) {
        return Err(PropertyFailure("shift study losses are not ordered as expected".into()).into());
    }
    Ok(())
}

fn cmd_adapter_bench(c: usize, r: usize, k: usize, size: usize) -> Result<()> {
    let spec = |down, up| AdapterSpec {
        down,
        up,
        kernel: k,
        ratio: r,
        norm: NormKind::Batch,
        act: ActKind::Relu,
        channels: c,
        height: size,
        width: size,
    };
    let variants = [
        ("H", LayerKind::Conv, LayerKind::Conv),
        ("B", LayerKind::Conv, LayerKind::Linear),
        ("S", LayerKind::Linear, LayerKind::Conv),
        ("T", LayerKind::Linear, LayerKind::Linear),
        ("ours", LayerKind::Conv, LayerKind::Linear),
    ];
    println!("variant  down    up      params (C={c}, r={r}, k={k}, {size}x{size})");
    let mut counts = std::collections::HashMap::new();
    for (name, down, up) in variants {
        let n = param_count(&spec(down, up)).map_err(|e| anyhow!("{e}"))?;
        println!("{name:<8} {down:<7} {up:<7} {n}", down = label(down), up = label(up));
        counts.insert(name, n);
    }
    let (h, b, s, t, ours) =
        (counts["H"], counts["B"], counts["S"], counts["T"], counts["ours"]);
    if s != ours || b != s {
        return Err(PropertyFailure(format!(
            "mixed-variant symmetry broken: B={b}, S={s}, ours={ours}"
        ))
        .into());
    }
    if !(h > b && b > t) {
        return Err(PropertyFailure(format!("ordering broken: H={h}, B={b}, T={t}")).into());
    }
    println!("symmetry and ordering hold");
    Ok(())
}

fn label(kind: LayerKind) -> &'static str {
    match kind {
        LayerKind::Conv => "conv",
        LayerKind::Linear => "linear",
    }
}

fn cmd_adapter_demo(
    k_percent: f64,
    seed: u64,
    steps: usize,
    lr: f64,
    shift_scale: f64,
    shift_offset: f64,
) -> Result<()> {
    let source = |x: &FeatureMap| 0.6 * x.data.iter().sum::<f64>() / x.data.len() as f64;
    let target = move |x: &FeatureMap| shift_scale * source(x) + shift_offset;
    let report =
        leda_demo(&source, &target, k_percent, steps, lr, seed).map_err(|e| anyhow!("{e}"))?;
    let drop = 1.0 - report.target_err_after / report.target_err_before;
    println!("adapter params:       {}", report.adapter_params);
    println!("target samples used:  {}", report.target_samples_used);
    println!("target err before:    {:.6}", report.target_err_before);
    println!("target err after:     {:.6}", report.target_err_after);
    println!("target err drop:      {:.1}%", drop * 100.0);
    println!("source retention err: {:e}", report.source_retention_err);
    if report.source_retention_err != 0.0 {
        return Err(PropertyFailure(
            "bypassed source outputs changed during adaptation".into(),
        )
        .into());
    }
    Ok(())
}

fn cmd_metrics_match(preds: &Path, gts: &Path, output: Option<&Path>) -> Result<()> {
    let mut manifest = ManifestBuilder::new("metrics match");
    manifest.input(preds)?;
    manifest.input(gts)?;
    let preds = load_boxes(preds)?;
    let gts = load_boxes(gts)?;
    let bundle = match_and_score(&preds, &gts, &EvalConfig::default()).map_err(|e| anyhow!("{e}"))?;
    println!("mAP   mATE  mASE  mAOE  NDS*");
    println!(
        "{:.3} {:.3} {:.3} {:.3} {:.3}",
        bundle.map, bundle.mate, bundle.mase, bundle.maoe, bundle.nds
    );
    if let Some(path) = output {
        write_json_pretty(path, &MetricBundleJson::from(&bundle))?;
        write_manifest_for(path, &manifest.finish())?;
    }
    Ok(())
}
