//! Per-frame orchestration: point sampling, dynamic-object gating,
//! two-model ego-motion initialization, estimator invocation, and track
//! bookkeeping.
//!
//! A frame pair (k-1, k) is processed in this order: static points are
//! sampled on the k-1 background grid and the camera motion is estimated
//! (propagation and P3P+RANSAC initialization, most inliers wins); object
//! points are sampled on the k-1 instance masks, classified by scene flow,
//! and labels are propagated onto the k masks; each gated dynamic object is
//! estimated and its motion H = T * X recovered; tracks, centroids, and
//! velocities are updated.

use crate::dataio::{DepthMap, FlowField, InstanceMask};
use crate::dynamics::{
    classify_object, compute_scene_flow, propagate_labels, MotionClass, ObjectTrack,
    SceneFlowVector, TrackLabelSet,
};
use crate::estimator::{
    estimate_camera_motion, estimate_joint, estimate_object_motion, init_by_p3p_ransac,
    init_by_propagation, inlier_mask, select_model, Correspondence, EstimateError,
    EstimateResult, EstimationMode, SolverConfig,
};
use crate::eval::epe_points;
use crate::geometry::{
    backproject, recover_object_motion, FlowVector, ImagePoint, Intrinsics, Point3, SE3Pose,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

/// Object points are sampled every 3rd pixel in both axes within the mask.
pub const OBJECT_SAMPLE_STRIDE: u32 = 3;

/// One time step of input data. The flow field maps k-1 pixels into frame k
/// and is indexed on the k-1 grid; frame 0 carries no flow.
#[derive(Debug, Clone)]
pub struct Frame {
    pub index: usize,
    pub depth: DepthMap,
    pub flow: Option<FlowField>,
    pub mask: InstanceMask,
    pub intrinsics: Intrinsics,
    /// Frame period in seconds.
    pub period: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SolveMode {
    /// Optimize motion and per-point flow jointly.
    Joint,
    /// Optimize motion with the measured flow held fixed.
    MotionOnly,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PipelineConfig {
    pub solver: SolverConfig,
    /// Background sampling grid step, px.
    pub grid_step: u32,
    pub min_static_points: usize,
    pub min_object_points: usize,
    /// Background points beyond this depth are not sampled, m.
    pub max_background_depth: f64,
    /// Scene-flow magnitude above which a point counts as moving, m.
    pub sf_threshold: f64,
    /// Fraction of moving points above which an object is dynamic.
    pub sf_proportion: f64,
    /// Objects with mean depth beyond this are not estimated, m.
    pub max_depth_gate: f64,
    /// Objects below this image-area fraction are not estimated.
    pub min_area_gate: f64,
    pub mode: SolveMode,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            solver: SolverConfig::default(),
            grid_step: 8,
            min_static_points: 10,
            min_object_points: 30,
            max_background_depth: 40.0,
            sf_threshold: 0.12,
            sf_proportion: 0.3,
            max_depth_gate: 25.0,
            min_area_gate: 0.005,
            mode: SolveMode::Joint,
            seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("frame {0} has no flow field")]
    MissingFlow(usize),
    #[error("frames {prev} and {curr} are not consecutive")]
    NonConsecutive { prev: usize, curr: usize },
    #[error("degenerate frame {frame}: {have} static points, need {need}")]
    DegenerateFrame { frame: usize, have: usize, need: usize },
    #[error("camera estimation failed on frame {frame}: {source}")]
    CameraEstimation { frame: usize, source: EstimateError },
    #[error("frame {frame} rasters disagree in size")]
    DimensionMismatch { frame: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraResult {
    pub motion: SE3Pose,
    pub init_model: InitModel,
    pub points: usize,
    pub inliers: usize,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitModel {
    Propagation,
    P3pRansac,
}

/// Mean end-point error of the sampled flows against ground truth, before
/// (measured) and after (refined) optimization. Only available when a
/// ground-truth flow field is supplied.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FlowEpe {
    pub before: f64,
    pub after: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectResult {
    /// Instance id in the current frame's mask.
    pub instance_id: u16,
    /// Persistent tracking label (0 = static/untracked).
    pub label: u32,
    pub classification: MotionClass,
    /// Whether the depth/area gate accepted the object for estimation.
    pub gated: bool,
    pub estimated: bool,
    /// Object motion H in the k-1 camera frame, when estimated.
    pub motion: Option<SE3Pose>,
    pub velocity_kmh: Option<f64>,
    pub centroid: Option<[f64; 3]>,
    pub mean_depth: f64,
    pub area_fraction: f64,
    pub point_count: usize,
    pub inliers: usize,
    pub flow_epe: Option<FlowEpe>,
    /// Reason the object was skipped, when it was.
    pub note: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameResult {
    pub frame_index: usize,
    pub camera: CameraResult,
    pub objects: Vec<ObjectResult>,
    pub static_flow: Option<FlowEpe>,
}

/// Cross-frame pipeline state.
pub struct SequenceState {
    pub labels: TrackLabelSet,
    pub tracks: BTreeMap<u32, ObjectTrack>,
    pub last_camera_motion: Option<SE3Pose>,
    rng: ChaCha8Rng,
}

impl SequenceState {
    pub fn new(seed: u64) -> Self {
        Self {
            labels: TrackLabelSet::new(),
            tracks: BTreeMap::new(),
            last_camera_motion: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

/// Deterministic grid sampling of background correspondences on the k-1
/// frame, displaced by the k-1 -> k flow field.
pub fn sample_static_points(
    prev: &Frame,
    flow: &FlowField,
    cfg: &PipelineConfig,
) -> Result<Vec<Correspondence>, PipelineError> {
    let k = &prev.intrinsics;
    let mut out = Vec::new();
    let mut v = 0;
    while v < prev.depth.height {
        let mut u = 0;
        while u < prev.depth.width {
            if prev.mask.get(u, v) == 0
                && prev.depth.is_valid_at(u, v)
                && flow.is_valid_at(u, v)
            {
                let d = prev.depth.get(u, v) as f64;
                if d <= cfg.max_background_depth {
                    let p = ImagePoint::new(u as f64, v as f64);
                    let m = backproject(p, d, k).expect("validated depth");
                    out.push(Correspondence::new(p, m, flow.get(u, v)));
                }
            }
            u += cfg.grid_step;
        }
        v += cfg.grid_step;
    }
    if out.len() < cfg.min_static_points {
        return Err(PipelineError::DegenerateFrame {
            frame: prev.index,
            have: out.len(),
            need: cfg.min_static_points,
        });
    }
    Ok(out)
}

/// Dense object correspondences: every 3rd pixel in both axes within the
/// k-1 instance mask, where depth and flow are valid.
pub fn sample_object_points(prev: &Frame, flow: &FlowField, instance: u16) -> Vec<Correspondence> {
    let k = &prev.intrinsics;
    let mut out = Vec::new();
    let mut v = 0;
    while v < prev.depth.height {
        let mut u = 0;
        while u < prev.depth.width {
            if prev.mask.get(u, v) == instance
                && prev.depth.is_valid_at(u, v)
                && flow.is_valid_at(u, v)
            {
                let p = ImagePoint::new(u as f64, v as f64);
                let m = backproject(p, prev.depth.get(u, v) as f64, k).expect("validated depth");
                out.push(Correspondence::new(p, m, flow.get(u, v)));
            }
            u += OBJECT_SAMPLE_STRIDE;
        }
        v += OBJECT_SAMPLE_STRIDE;
    }
    out
}

/// Depth/area gate: only near, sufficiently large objects are estimated.
pub fn gate_object(mean_depth: f64, area_fraction: f64, cfg: &PipelineConfig) -> bool {
    mean_depth <= cfg.max_depth_gate && area_fraction >= cfg.min_area_gate
}

/// Back-projects the observed current-frame point at the flowed (sub-pixel)
/// position. Depth is sampled bilinearly; the 2x2 stencil must lie inside
/// the image, carry valid depth, and agree on the instance id, otherwise
/// the correspondence is unusable (depth edges and occlusions).
fn backproject_current(
    depth: &DepthMap,
    mask: &InstanceMask,
    q: ImagePoint,
    expected_instance: u16,
    k: &Intrinsics,
) -> Option<Point3> {
    let u0 = q.u.floor();
    let v0 = q.v.floor();
    if u0 < 0.0 || v0 < 0.0 {
        return None;
    }
    let (u0, v0) = (u0 as u32, v0 as u32);
    let u1 = u0 + 1;
    let v1 = v0 + 1;
    if u1 >= depth.width || v1 >= depth.height {
        return None;
    }
    for (su, sv) in [(u0, v0), (u1, v0), (u0, v1), (u1, v1)] {
        if !depth.is_valid_at(su, sv) || mask.get(su, sv) != expected_instance {
            return None;
        }
    }
    let fu = q.u - u0 as f64;
    let fv = q.v - v0 as f64;
    let z = (1.0 - fu) * (1.0 - fv) * depth.get(u0, v0) as f64
        + fu * (1.0 - fv) * depth.get(u1, v0) as f64
        + (1.0 - fu) * fv * depth.get(u0, v1) as f64
        + fu * fv * depth.get(u1, v1) as f64;
    backproject(q, z, k).ok()
}

fn check_pair(prev: &Frame, curr: &Frame) -> Result<(), PipelineError> {
    if curr.index != prev.index + 1 {
        return Err(PipelineError::NonConsecutive { prev: prev.index, curr: curr.index });
    }
    for f in [prev, curr] {
        let (w, h) = (f.depth.width, f.depth.height);
        let flow_ok = f
            .flow
            .as_ref()
            .map(|fl| fl.width == w && fl.height == h)
            .unwrap_or(true);
        if f.mask.width != w || f.mask.height != h || !flow_ok {
            return Err(PipelineError::DimensionMismatch { frame: f.index });
        }
    }
    Ok(())
}

/// Processes one consecutive frame pair, updating the sequence state.
///
/// `gt_flow` is the ground-truth flow field for the pair (k-1 grid), used
/// only to report end-point-error statistics of the measured and refined
/// flows. Per-object estimation failures are isolated into the object's
/// result; only camera failures abort the frame.
pub fn process_frame(
    prev: &Frame,
    curr: &Frame,
    state: &mut SequenceState,
    cfg: &PipelineConfig,
    gt_flow: Option<&FlowField>,
) -> Result<FrameResult, PipelineError> {
    check_pair(prev, curr)?;
    let flow = curr.flow.as_ref().ok_or(PipelineError::MissingFlow(curr.index))?;
    let k = &prev.intrinsics;

    // (1) static sampling + (2) two-model camera initialization and solve
    let static_corrs = sample_static_points(prev, flow, cfg)?;
    let propagation = init_by_propagation(state.last_camera_motion.as_ref());
    let prop_count = inlier_mask(
        &static_corrs,
        &propagation,
        EstimationMode::Camera,
        cfg.solver.inlier_threshold,
        k,
    )
    .iter()
    .filter(|&&b| b)
    .count();
    let mut candidates = vec![(propagation, prop_count)];
    if let Ok((pose, mask)) = init_by_p3p_ransac(&static_corrs, &cfg.solver, k, &mut state.rng) {
        candidates.push((pose, mask.iter().filter(|&&b| b).count()));
    }
    let init = select_model(&candidates).expect("at least the propagation candidate");
    let init_model = if candidates.len() > 1 && candidates[1].1 > candidates[0].1 {
        InitModel::P3pRansac
    } else {
        InitModel::Propagation
    };

    let cam = solve(&static_corrs, &init, cfg, k, EstimationMode::Camera)
        .map_err(|source| PipelineError::CameraEstimation { frame: curr.index, source })?;
    let camera_motion = cam.motion;
    let static_flow = flow_epe_stats(&static_corrs, cam.refined_flow.as_deref(), gt_flow);
    let camera = CameraResult {
        motion: camera_motion,
        init_model,
        points: static_corrs.len(),
        inliers: cam.inlier_count(),
        final_cost: cam.final_cost,
        iterations: cam.iterations,
        converged: cam.converged,
    };

    // (3) object sampling, scene-flow classification, label propagation
    let prev_instances = prev.mask.instance_ids();
    let mut object_corrs: BTreeMap<u16, Vec<Correspondence>> = BTreeMap::new();
    for &i in &prev_instances {
        object_corrs.insert(i, sample_object_points(prev, flow, i));
    }

    // Landing instance of every sampled object correspondence (flowed
    // position rounded for mask indexing).
    let mut landings: BTreeMap<u16, Vec<Option<u16>>> = BTreeMap::new();
    let mut land_counts: BTreeMap<u16, BTreeMap<u16, usize>> = BTreeMap::new();
    for (&i, corrs) in &object_corrs {
        let lands: Vec<Option<u16>> = corrs
            .iter()
            .map(|c| {
                let q = c.p_curr();
                let (qu, qv) = (q.u.round(), q.v.round());
                if qu < 0.0
                    || qv < 0.0
                    || qu >= curr.mask.width as f64
                    || qv >= curr.mask.height as f64
                {
                    return None;
                }
                let j = curr.mask.get(qu as u32, qv as u32);
                (j != 0).then_some(j)
            })
            .collect();
        for j in lands.iter().flatten() {
            *land_counts.entry(*j).or_default().entry(i).or_insert(0) += 1;
        }
        landings.insert(i, lands);
    }

    // Scene flow per current instance, taken only from its modal source
    // instance at k-1. Points crossing over from another (occluding)
    // object would otherwise contaminate the verdict with bogus pairs.
    let mut scene_flows: BTreeMap<u16, Vec<SceneFlowVector>> = BTreeMap::new();
    for (&j, votes) in &land_counts {
        let Some((&source, _)) = votes.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        else {
            continue;
        };
        let corrs = &object_corrs[&source];
        let lands = &landings[&source];
        let mut flows = Vec::new();
        for (c, land) in corrs.iter().zip(lands) {
            if *land != Some(j) {
                continue;
            }
            if let Some(m_curr) = backproject_current(&curr.depth, &curr.mask, c.p_curr(), j, k) {
                flows.push(compute_scene_flow(&c.m_prev, &m_curr, &camera_motion));
            }
        }
        scene_flows.insert(j, flows);
    }

    let curr_instances = curr.mask.instance_ids();
    let mut classifications: BTreeMap<u16, MotionClass> = BTreeMap::new();
    let mut dynamic_set: BTreeSet<u16> = BTreeSet::new();
    for &j in &curr_instances {
        // Objects without usable scene flow (fresh entries at the image
        // boundary) default to static until they accumulate evidence.
        let class = scene_flows
            .get(&j)
            .and_then(|flows| classify_object(flows, cfg.sf_threshold, cfg.sf_proportion).ok())
            .unwrap_or(MotionClass::Static);
        if class == MotionClass::Dynamic {
            dynamic_set.insert(j);
        }
        classifications.insert(j, class);
    }

    let propagation_result =
        propagate_labels(&prev.mask, &state.labels, &curr.mask, flow, &dynamic_set);

    // (4) per accepted dynamic object: initialize, estimate, recover H
    let total_px = curr.mask.width as f64 * curr.mask.height as f64;
    let mut objects = Vec::new();
    let mut seen_labels: BTreeSet<u32> = BTreeSet::new();
    for &j in &curr_instances {
        let assignment = propagation_result.assignments[&j];
        let label = assignment.label;
        let class = classifications[&j];
        let area_fraction = curr.mask.area(j) as f64 / total_px;
        let mean_depth = mean_instance_depth(&curr.depth, &curr.mask, j);
        let gated = gate_object(mean_depth, area_fraction, cfg);

        let mut result = ObjectResult {
            instance_id: j,
            label,
            classification: class,
            gated,
            estimated: false,
            motion: None,
            velocity_kmh: None,
            centroid: None,
            mean_depth,
            area_fraction,
            point_count: 0,
            inliers: 0,
            flow_epe: None,
            note: None,
        };

        if class == MotionClass::Dynamic && label != 0 {
            let corrs = object_corrs.get(&assignment.modal_prev_instance);
            match corrs {
                Some(corrs) if assignment.modal_prev_instance != 0 => {
                    result.point_count = corrs.len();
                    if !gated {
                        result.note = Some("rejected by depth/area gate".into());
                    } else if corrs.len() < cfg.min_object_points {
                        result.note = Some(format!(
                            "tracked but unestimated: {} points < {}",
                            corrs.len(),
                            cfg.min_object_points
                        ));
                    } else {
                        let h_init = state
                            .tracks
                            .get(&label)
                            .and_then(|t| t.last_motion())
                            .unwrap_or_else(SE3Pose::identity);
                        let x_init = camera_motion.inverse() * h_init;
                        match solve(corrs, &x_init, cfg, k, EstimationMode::Object) {
                            Ok(est) => {
                                let h = recover_object_motion(&camera_motion, &est.motion);
                                let centroid = mean_point(corrs);
                                result.estimated = true;
                                result.motion = Some(h);
                                result.inliers = est.inlier_count();
                                result.centroid =
                                    Some([centroid.x, centroid.y, centroid.z]);
                                result.flow_epe =
                                    flow_epe_stats(corrs, est.refined_flow.as_deref(), gt_flow);
                            }
                            Err(e) => {
                                result.note = Some(format!("estimation failed: {e}"));
                            }
                        }
                    }
                }
                _ => {
                    result.note = Some("no prior-frame points (new object)".into());
                }
            }
        }

        // (5) track bookkeeping
        if label != 0 {
            seen_labels.insert(label);
            let track = state
                .tracks
                .entry(label)
                .or_insert_with(|| ObjectTrack::new(label));
            let centroid = result
                .centroid
                .map(|c| Point3::new(c[0], c[1], c[2]));
            track
                .update(
                    curr.index,
                    result.motion,
                    centroid,
                    result.point_count,
                    area_fraction,
                    mean_depth,
                    curr.period,
                    class,
                )
                .expect("positive frame period");
            result.velocity_kmh = track.records.last().and_then(|r| r.velocity_kmh);
        }
        objects.push(result);
    }

    for (label, track) in state.tracks.iter_mut() {
        if !seen_labels.contains(label) {
            track.mark_lost();
        }
    }
    state.labels = propagation_result.labels;
    state.last_camera_motion = Some(camera_motion);

    Ok(FrameResult { frame_index: curr.index, camera, objects, static_flow })
}

/// Runs the pipeline over a frame sequence. `gt_flows[i]` is the optional
/// ground-truth flow for the pair ending at `frames[i]`.
pub fn run_sequence(
    frames: &[Frame],
    cfg: &PipelineConfig,
    gt_flows: Option<&[Option<FlowField>]>,
) -> Result<Vec<FrameResult>, PipelineError> {
    let mut state = SequenceState::new(cfg.seed);
    let mut results = Vec::new();
    for i in 1..frames.len() {
        let gt_flow = gt_flows.and_then(|g| g.get(i)).and_then(|f| f.as_ref());
        results.push(process_frame(&frames[i - 1], &frames[i], &mut state, cfg, gt_flow)?);
    }
    Ok(results)
}

fn solve(
    corrs: &[Correspondence],
    init: &SE3Pose,
    cfg: &PipelineConfig,
    k: &Intrinsics,
    mode: EstimationMode,
) -> Result<EstimateResult, EstimateError> {
    match cfg.mode {
        SolveMode::Joint => estimate_joint(corrs, init, &cfg.solver, k, mode),
        SolveMode::MotionOnly => match mode {
            EstimationMode::Camera => estimate_camera_motion(corrs, init, &cfg.solver, k),
            EstimationMode::Object => estimate_object_motion(corrs, init, &cfg.solver, k),
        },
    }
}

fn mean_instance_depth(depth: &DepthMap, mask: &InstanceMask, instance: u16) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in 0..depth.height {
        for u in 0..depth.width {
            if mask.get(u, v) == instance && depth.is_valid_at(u, v) {
                sum += depth.get(u, v) as f64;
                n += 1;
            }
        }
    }
    if n == 0 {
        f64::INFINITY
    } else {
        sum / n as f64
    }
}

fn mean_point(corrs: &[Correspondence]) -> Point3 {
    let mut acc = nalgebra::Vector3::zeros();
    for c in corrs {
        acc += c.m_prev.coords;
    }
    Point3::from(acc / corrs.len() as f64)
}

fn flow_epe_stats(
    corrs: &[Correspondence],
    refined: Option<&[FlowVector]>,
    gt_flow: Option<&FlowField>,
) -> Option<FlowEpe> {
    let gt = gt_flow?;
    let mut before = Vec::new();
    let mut after = Vec::new();
    for (i, c) in corrs.iter().enumerate() {
        let (u, v) = (c.p_prev.u as u32, c.p_prev.v as u32);
        if u >= gt.width || v >= gt.height || !gt.is_valid_at(u, v) {
            continue;
        }
        let truth = gt.get(u, v);
        before.push((c.flow, truth));
        if let Some(r) = refined {
            after.push((r[i], truth));
        }
    }
    let before_stats = epe_points(&before).ok()?;
    let after_mean = epe_points(&after).ok().map(|s| s.mean);
    Some(FlowEpe { before: before_stats.mean, after: after_mean, count: before_stats.count })
}
