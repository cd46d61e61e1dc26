//! Command-line front end: generate synthetic scenes, run the pipeline over
//! a manifest, sweep noise levels, ablate joint vs motion-only estimation,
//! and evaluate results against ground truth.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mbvo::dataio::{
    apply_depth_noise, apply_flow_noise, apply_flow_outliers, generate_synthetic, load_sequence,
    write_sequence, GroundTruth, NoiseScope, NoiseSpec, SequenceManifest, SyntheticSceneSpec,
    FlowField,
};
use mbvo::eval::{build_report, pose_change_error, MeanAccumulator, Report};
use mbvo::pipeline::{run_sequence, Frame, FrameResult, PipelineConfig, SolveMode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "mbvo",
    version,
    about = "Multi-body visual odometry: camera and per-object SE(3) motion \
             from depth, optical flow, and instance masks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic sequence (rasters, ground truth, manifest) from
    /// a scene spec file.
    Synth {
        /// Scene spec JSON.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Process a sequence manifest and write per-frame results and a report.
    Run {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[command(flatten)]
        noise: NoiseArgs,
    },
    /// Sweep a noise parameter over a ground-truth sequence and tabulate
    /// error versus noise level.
    NoiseSweep {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Which noise parameter to sweep.
        #[arg(long, value_parser = ["dd", "flow-sigma"])]
        param: String,
        /// Comma-separated noise levels.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        /// Seeds averaged per level.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[command(flatten)]
        noise: NoiseArgs,
    },
    /// Compare joint against motion-only estimation on the same noisy
    /// frames.
    Ablate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Seeds averaged.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[command(flatten)]
        noise: NoiseArgs,
    },
    /// Evaluate previously written per-frame results against a manifest's
    /// ground truth.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        /// frames.jsonl written by `run`.
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
}

#[derive(Args, Clone)]
struct PipelineArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Re-projection residual sigma, px.
    #[arg(long, default_value_t = 1.0)]
    sigma1: f64,
    /// Flow-prior residual sigma, px (joint mode).
    #[arg(long, default_value_t = 0.5)]
    sigma2: f64,
    #[arg(long, default_value_t = 1.345)]
    huber_delta: f64,
    /// Scene-flow magnitude threshold, m.
    #[arg(long, default_value_t = 0.12)]
    sf_threshold: f64,
    /// Dynamic-point proportion threshold.
    #[arg(long, default_value_t = 0.3)]
    sf_proportion: f64,
    /// Background sampling grid step, px.
    #[arg(long, default_value_t = 8)]
    grid_step: u32,
    /// Object depth gate, m.
    #[arg(long, default_value_t = 25.0)]
    max_depth_gate: f64,
    /// Object image-area gate, fraction.
    #[arg(long, default_value_t = 0.005)]
    min_area_gate: f64,
    /// Frame rate override for velocity conversion; the manifest period is
    /// used when absent.
    #[arg(long)]
    fps: Option<f64>,
    #[arg(long, value_enum, default_value_t = SolveMode::Joint)]
    mode: SolveMode,
}

impl PipelineArgs {
    fn to_config(&self) -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.solver.sigma1 = nalgebra::Matrix2::identity() * self.sigma1 * self.sigma1;
        cfg.solver.sigma2 = nalgebra::Matrix2::identity() * self.sigma2 * self.sigma2;
        cfg.solver.huber_delta = self.huber_delta;
        cfg.sf_threshold = self.sf_threshold;
        cfg.sf_proportion = self.sf_proportion;
        cfg.grid_step = self.grid_step;
        cfg.max_depth_gate = self.max_depth_gate;
        cfg.min_area_gate = self.min_area_gate;
        cfg.mode = self.mode;
        cfg.seed = self.seed;
        cfg
    }

    fn period(&self, manifest_period: f64) -> f64 {
        match self.fps {
            Some(fps) => 1.0 / fps,
            None => manifest_period,
        }
    }
}

#[derive(Args, Clone)]
struct NoiseArgs {
    /// Depth disparity accuracy (Delta d), px. 0 disables depth noise.
    #[arg(long, default_value_t = 0.0)]
    dd: f64,
    /// Stereo baseline for the depth noise model, m.
    #[arg(long, default_value_t = 0.5)]
    baseline: f64,
    /// Per-axis Gaussian flow noise sigma, px.
    #[arg(long, default_value_t = 0.0)]
    flow_sigma: f64,
    /// Fraction of flow vectors hit by gross uniform outliers.
    #[arg(long, default_value_t = 0.0)]
    flow_outlier_frac: f64,
    /// Half-range of the outlier corruption, px.
    #[arg(long, default_value_t = 20.0)]
    flow_outlier_range: f64,
}

impl NoiseArgs {
    fn spec(&self) -> NoiseSpec {
        NoiseSpec {
            disparity_accuracy: self.dd,
            baseline: self.baseline,
            flow_sigma: [self.flow_sigma, self.flow_sigma],
            flow_outlier_fraction: self.flow_outlier_frac,
            flow_outlier_range: self.flow_outlier_range,
        }
    }

    fn with_dd(&self, dd: f64) -> NoiseArgs {
        NoiseArgs { dd, ..self.clone() }
    }

    fn with_flow_sigma(&self, sigma: f64) -> NoiseArgs {
        NoiseArgs { flow_sigma: sigma, ..self.clone() }
    }

    fn is_active(&self) -> bool {
        self.dd > 0.0 || self.flow_sigma > 0.0 || self.flow_outlier_frac > 0.0
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { spec, out_dir } => cmd_synth(&spec, &out_dir),
        Command::Run { manifest, out_dir, pipeline, noise } => {
            cmd_run(&manifest, &out_dir, &pipeline, &noise)
        }
        Command::NoiseSweep { manifest, out_dir, param, values, seeds, pipeline, noise } => {
            cmd_noise_sweep(&manifest, &out_dir, &param, &values, seeds, &pipeline, &noise)
        }
        Command::Ablate { manifest, out_dir, seeds, pipeline, noise } => {
            cmd_ablate(&manifest, &out_dir, seeds, &pipeline, &noise)
        }
        Command::Eval { manifest, results, out_dir, pipeline } => {
            cmd_eval(&manifest, &results, &out_dir, &pipeline)
        }
    }
}

fn cmd_synth(spec_path: &Path, out_dir: &Path) -> Result<()> {
    let spec = SyntheticSceneSpec::from_json_file(spec_path)
        .with_context(|| format!("loading scene spec {}", spec_path.display()))?;
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let seq = generate_synthetic(&spec)?;
    let manifest = write_sequence(&seq, out_dir)?;
    println!("wrote {} frames to {}", seq.frames.len(), manifest.display());
    Ok(())
}

/// Applies the requested noise in memory. Returns the clean flow fields so
/// refined flow can be scored against them (the loaded flow is the ground
/// truth of a synthetic sequence).
fn corrupt_frames(
    frames: &mut [Frame],
    noise: &NoiseArgs,
    seed: u64,
) -> Option<Vec<Option<FlowField>>> {
    if !noise.is_active() {
        return None;
    }
    let spec = noise.spec();
    let clean: Vec<Option<FlowField>> = frames.iter().map(|f| f.flow.clone()).collect();
    for frame in frames.iter_mut() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(frame.index as u64 + 1);
        let intrinsics = frame.intrinsics;
        if spec.disparity_accuracy > 0.0 {
            apply_depth_noise(&mut frame.depth, &intrinsics, &spec, &mut rng);
        }
        if let Some(flow) = frame.flow.as_mut() {
            apply_flow_noise(flow, spec.flow_sigma, NoiseScope::All, &frame.mask, &mut rng);
            apply_flow_outliers(
                flow,
                spec.flow_outlier_fraction,
                spec.flow_outlier_range,
                NoiseScope::All,
                &frame.mask,
                &mut rng,
            );
        }
    }
    Some(clean)
}

fn write_results(out_dir: &Path, results: &[FrameResult], report: &Report) -> Result<()> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let mut jsonl = String::new();
    for fr in results {
        jsonl.push_str(&serde_json::to_string(fr)?);
        jsonl.push('\n');
    }
    std::fs::write(out_dir.join("frames.jsonl"), jsonl)?;
    std::fs::write(out_dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
    Ok(())
}

fn cmd_run(
    manifest_path: &Path,
    out_dir: &Path,
    pipeline: &PipelineArgs,
    noise: &NoiseArgs,
) -> Result<()> {
    let manifest = SequenceManifest::load(manifest_path)
        .with_context(|| format!("loading manifest {}", manifest_path.display()))?;
    let mut frames = load_sequence(&manifest)?;
    for frame in frames.iter_mut() {
        frame.period = pipeline.period(manifest.period);
    }
    let gt = manifest.ground_truth()?;
    let gt_flows = corrupt_frames(&mut frames, noise, pipeline.seed);
    let cfg = pipeline.to_config();

    let started = Instant::now();
    let results = run_sequence(&frames, &cfg, gt_flows.as_deref())?;
    let elapsed = started.elapsed();

    let period = pipeline.period(manifest.period);
    let report = build_report(&results, gt.as_ref(), &cfg, period);
    write_results(out_dir, &results, &report)?;

    // wall-clock stays out of the deterministic report
    let fps = results.len() as f64 / elapsed.as_secs_f64();
    let timing = format!(
        "frames {}\nseconds {:.3}\nfps {:.2}\n",
        results.len(),
        elapsed.as_secs_f64(),
        fps
    );
    std::fs::write(out_dir.join("timing.txt"), &timing)?;
    eprintln!("processed {} frame pairs in {:.3}s ({:.2} fps)", results.len(), elapsed.as_secs_f64(), fps);
    if let Some(cam) = &report.camera {
        if let (Some(t), Some(r)) = (cam.mean_translation_m, cam.mean_rotation_deg) {
            println!("camera mean E_t {t:.6} m, mean E_R {r:.6} deg");
        }
    }
    println!("report: {}", out_dir.join("report.json").display());
    Ok(())
}

/// Mean camera and per-ground-truth-object pose errors of one run.
struct RunErrors {
    camera_t: MeanAccumulator,
    camera_r: MeanAccumulator,
    objects: BTreeMap<u32, (MeanAccumulator, MeanAccumulator)>,
    epe_before: MeanAccumulator,
    epe_after: MeanAccumulator,
}

fn run_errors(results: &[FrameResult], gt: &GroundTruth) -> RunErrors {
    let mut out = RunErrors {
        camera_t: MeanAccumulator::default(),
        camera_r: MeanAccumulator::default(),
        objects: BTreeMap::new(),
        epe_before: MeanAccumulator::default(),
        epe_after: MeanAccumulator::default(),
    };
    for fr in results {
        if let Some(gt_motion) = gt.camera_motion(fr.frame_index) {
            let e = pose_change_error(&fr.camera.motion, &gt_motion);
            out.camera_t.push(e.translation_m);
            out.camera_r.push(e.rotation_deg);
        }
        if let Some(s) = &fr.static_flow {
            out.epe_before.push_weighted(s.before * s.count as f64, s.count);
            if let Some(a) = s.after {
                out.epe_after.push_weighted(a * s.count as f64, s.count);
            }
        }
        for obj in &fr.objects {
            if let Some(s) = &obj.flow_epe {
                out.epe_before.push_weighted(s.before * s.count as f64, s.count);
                if let Some(a) = s.after {
                    out.epe_after.push_weighted(a * s.count as f64, s.count);
                }
            }
            let Some(est) = obj.motion else { continue };
            let Some(gt_motion) = gt.object_motion_camera_frame(fr.frame_index, obj.instance_id)
            else {
                continue;
            };
            // key errors by the scripted object for stability across frames
            let Some(gt_rec) = gt
                .objects
                .iter()
                .find(|o| o.frame == fr.frame_index && o.instance_id == obj.instance_id)
            else {
                continue;
            };
            let e = pose_change_error(&est, &gt_motion);
            let entry = out.objects.entry(gt_rec.object).or_default();
            entry.0.push(e.translation_m);
            entry.1.push(e.rotation_deg);
        }
    }
    out
}

fn cmd_noise_sweep(
    manifest_path: &Path,
    out_dir: &Path,
    param: &str,
    values: &[f64],
    seeds: u64,
    pipeline: &PipelineArgs,
    noise: &NoiseArgs,
) -> Result<()> {
    if values.is_empty() {
        bail!("--values needs at least one level");
    }
    let manifest = SequenceManifest::load(manifest_path)?;
    let gt = manifest
        .ground_truth()?
        .context("noise-sweep needs a manifest with ground-truth poses")?;
    let clean_frames = load_sequence(&manifest)?;
    let cfg = pipeline.to_config();
    let period = pipeline.period(manifest.period);

    let mut csv = String::from("param,value,entity,e_t_m,e_r_deg,epe_before,epe_after\n");
    println!("{:>10} {:>8} {:>10} {:>12} {:>12}", "param", "value", "entity", "E_t (m)", "E_R (deg)");
    for &value in values {
        let level_noise = match param {
            "dd" => noise.with_dd(value),
            "flow-sigma" => noise.with_flow_sigma(value),
            other => bail!("unknown sweep parameter `{other}`"),
        };
        let mut cam_t = MeanAccumulator::default();
        let mut cam_r = MeanAccumulator::default();
        let mut objs: BTreeMap<u32, (MeanAccumulator, MeanAccumulator)> = BTreeMap::new();
        let mut before = MeanAccumulator::default();
        let mut after = MeanAccumulator::default();
        for seed in 0..seeds {
            let mut frames = clean_frames.clone();
            for frame in frames.iter_mut() {
                frame.period = period;
            }
            let run_seed = pipeline.seed.wrapping_add(seed);
            let gt_flows = corrupt_frames(&mut frames, &level_noise, run_seed);
            let mut run_cfg = cfg;
            run_cfg.seed = run_seed;
            let results = run_sequence(&frames, &run_cfg, gt_flows.as_deref())?;
            let errs = run_errors(&results, &gt);
            cam_t.merge(&errs.camera_t);
            cam_r.merge(&errs.camera_r);
            for (id, (t, r)) in errs.objects {
                let entry = objs.entry(id).or_default();
                entry.0.merge(&t);
                entry.1.merge(&r);
            }
            before.merge(&errs.epe_before);
            after.merge(&errs.epe_after);
        }
        let mut emit = |entity: String, t: Option<f64>, r: Option<f64>| {
            let (t, r) = (t.unwrap_or(f64::NAN), r.unwrap_or(f64::NAN));
            writeln!(
                csv,
                "{param},{value},{entity},{t},{r},{},{}",
                before.mean().unwrap_or(f64::NAN),
                after.mean().unwrap_or(f64::NAN)
            )
            .unwrap();
            println!("{param:>10} {value:>8} {entity:>10} {t:>12.6} {r:>12.6}");
        };
        emit("camera".into(), cam_t.mean(), cam_r.mean());
        for (id, (t, r)) in &objs {
            emit(format!("object-{id}"), t.mean(), r.mean());
        }
    }
    std::fs::create_dir_all(out_dir)?;
    let csv_path = out_dir.join("sweep.csv");
    std::fs::write(&csv_path, csv)?;
    println!("table: {}", csv_path.display());
    Ok(())
}

fn cmd_ablate(
    manifest_path: &Path,
    out_dir: &Path,
    seeds: u64,
    pipeline: &PipelineArgs,
    noise: &NoiseArgs,
) -> Result<()> {
    let manifest = SequenceManifest::load(manifest_path)?;
    let gt = manifest
        .ground_truth()?
        .context("ablate needs a manifest with ground-truth poses")?;
    let clean_frames = load_sequence(&manifest)?;
    let period = pipeline.period(manifest.period);
    // Default corruption mirrors the depth-noise + learned-flow-error
    // protocol the joint refinement is meant for.
    let noise = if noise.is_active() {
        noise.clone()
    } else {
        NoiseArgs { dd: 0.2, flow_sigma: 0.3, flow_outlier_frac: 0.1, ..noise.clone() }
    };

    struct Side {
        t: BTreeMap<String, MeanAccumulator>,
        r: BTreeMap<String, MeanAccumulator>,
        epe_before: MeanAccumulator,
        epe_after: MeanAccumulator,
    }
    let mut sides: BTreeMap<&str, Side> = BTreeMap::new();
    for mode_name in ["motion-only", "joint"] {
        sides.insert(
            mode_name,
            Side {
                t: BTreeMap::new(),
                r: BTreeMap::new(),
                epe_before: MeanAccumulator::default(),
                epe_after: MeanAccumulator::default(),
            },
        );
    }

    for seed in 0..seeds {
        let run_seed = pipeline.seed.wrapping_add(seed);
        let mut frames = clean_frames.clone();
        for frame in frames.iter_mut() {
            frame.period = period;
        }
        let gt_flows = corrupt_frames(&mut frames, &noise, run_seed);
        for (mode_name, mode) in [("motion-only", SolveMode::MotionOnly), ("joint", SolveMode::Joint)]
        {
            let mut cfg = pipeline.to_config();
            cfg.mode = mode;
            cfg.seed = run_seed;
            let results = run_sequence(&frames, &cfg, gt_flows.as_deref())?;
            let errs = run_errors(&results, &gt);
            let side = sides.get_mut(mode_name).unwrap();
            side.t.entry("ego".into()).or_default().merge(&errs.camera_t);
            side.r.entry("ego".into()).or_default().merge(&errs.camera_r);
            for (id, (t, r)) in errs.objects {
                side.t.entry(format!("object-{id}")).or_default().merge(&t);
                side.r.entry(format!("object-{id}")).or_default().merge(&r);
            }
            side.epe_before.merge(&errs.epe_before);
            side.epe_after.merge(&errs.epe_after);
        }
    }

    let motion_only = &sides["motion-only"];
    let joint = &sides["joint"];
    let mut csv =
        String::from("entity,motion_only_e_t,motion_only_e_r,joint_e_t,joint_e_r\n");
    println!(
        "{:>10} {:>14} {:>14} {:>14} {:>14}",
        "entity", "mo E_t (m)", "mo E_R (deg)", "joint E_t", "joint E_R"
    );
    for entity in motion_only.t.keys() {
        let mo_t = motion_only.t[entity].mean().unwrap_or(f64::NAN);
        let mo_r = motion_only.r[entity].mean().unwrap_or(f64::NAN);
        let j_t = joint.t.get(entity).and_then(|a| a.mean()).unwrap_or(f64::NAN);
        let j_r = joint.r.get(entity).and_then(|a| a.mean()).unwrap_or(f64::NAN);
        writeln!(csv, "{entity},{mo_t},{mo_r},{j_t},{j_r}").unwrap();
        println!("{entity:>10} {mo_t:>14.6} {mo_r:>14.6} {j_t:>14.6} {j_r:>14.6}");
    }
    println!(
        "flow EPE: measured {:.4} px, joint-refined {:.4} px",
        joint.epe_before.mean().unwrap_or(f64::NAN),
        joint.epe_after.mean().unwrap_or(f64::NAN)
    );
    std::fs::create_dir_all(out_dir)?;
    let csv_path = out_dir.join("ablate.csv");
    std::fs::write(&csv_path, csv)?;
    println!("table: {}", csv_path.display());
    Ok(())
}

fn cmd_eval(
    manifest_path: &Path,
    results_path: &Path,
    out_dir: &Path,
    pipeline: &PipelineArgs,
) -> Result<()> {
    let manifest = SequenceManifest::load(manifest_path)?;
    let gt = manifest
        .ground_truth()?
        .context("eval needs a manifest with ground-truth poses")?;
    let text = std::fs::read_to_string(results_path)
        .with_context(|| format!("reading {}", results_path.display()))?;
    let mut results: Vec<FrameResult> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        results.push(
            serde_json::from_str(line)
                .with_context(|| format!("{}:{}", results_path.display(), lineno + 1))?,
        );
    }
    let cfg = pipeline.to_config();
    let period = pipeline.period(manifest.period);
    let report = build_report(&results, Some(&gt), &cfg, period);
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join("report.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
    if let Some(cam) = &report.camera {
        if let (Some(t), Some(r)) = (cam.mean_translation_m, cam.mean_rotation_deg) {
            println!("camera mean E_t {t:.6} m, mean E_R {r:.6} deg");
        }
    }
    if let Some(v) = &report.velocity {
        if let Some(m) = v.mean_over_tracks {
            println!("velocity mean E_v over tracks: {m:.3} km/h");
        }
    }
    println!("report: {}", path.display());
    Ok(())
}
