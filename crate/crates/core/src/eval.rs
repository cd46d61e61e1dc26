//! Pose, velocity, and optical-flow error metrics, and the machine-readable
//! report assembled from per-frame pipeline results.

use crate::dataio::{FlowField, GroundTruth};
use crate::geometry::{FlowVector, Point3, SE3Pose};
use crate::pipeline::{FrameResult, PipelineConfig};
use nalgebra::Matrix3;
use serde::Serialize;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("frame period must be positive, got {0}")]
    InvalidPeriod(f64),
    #[error("flow fields differ in size")]
    DimensionMismatch,
    #[error("empty evaluation region")]
    EmptyRegion,
}

/// Pose change error: E = est^-1 * gt, translation norm in meters and
/// rotation angle in degrees.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PoseError {
    pub translation_m: f64,
    pub rotation_deg: f64,
}

pub fn pose_change_error(est: &SE3Pose, gt: &SE3Pose) -> PoseError {
    let e = est.inverse() * *gt;
    let r = e.rotation();
    // atan2 of the (sin, cos) pair recovered from R: the pure-trace acos
    // form loses ~1e-6 deg of resolution near zero, which matters at the
    // exact-recovery tolerances used in the tests
    let sin = 0.5
        * nalgebra::Vector3::new(
            r[(2, 1)] - r[(1, 2)],
            r[(0, 2)] - r[(2, 0)],
            r[(1, 0)] - r[(0, 1)],
        )
        .norm();
    let cos = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    PoseError {
        translation_m: e.translation().norm(),
        rotation_deg: sin.atan2(cos).to_degrees(),
    }
}

/// Object speed in km/h from its global-frame motion H and centroid c:
/// the per-frame centroid displacement ||t - (I - R) c|| scaled by the
/// frame rate. Any fixed frame works as long as H and c share it.
pub fn object_velocity(h_global: &SE3Pose, centroid: &Point3, period: f64) -> Result<f64, EvalError> {
    if !(period > 0.0) {
        return Err(EvalError::InvalidPeriod(period));
    }
    let r = h_global.rotation();
    let t = h_global.translation();
    let displacement = t - (Matrix3::identity() - r) * centroid.coords;
    Ok(displacement.norm() * 3.6 / period)
}

pub fn velocity_error(est_kmh: f64, gt_kmh: f64) -> f64 {
    (est_kmh - gt_kmh).abs()
}

/// End-point-error statistics over a point set or region.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EpeStats {
    pub mean: f64,
    /// Mean absolute per-axis errors.
    pub mean_du: f64,
    pub mean_dv: f64,
    pub median: f64,
    pub p90: f64,
    pub max: f64,
    pub count: usize,
}

fn epe_from_errors(mut norms: Vec<f64>, sum_du: f64, sum_dv: f64) -> Result<EpeStats, EvalError> {
    if norms.is_empty() {
        return Err(EvalError::EmptyRegion);
    }
    let n = norms.len();
    let mean = norms.iter().sum::<f64>() / n as f64;
    norms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let quantile = |q: f64| norms[((n - 1) as f64 * q).round() as usize];
    Ok(EpeStats {
        mean,
        mean_du: sum_du / n as f64,
        mean_dv: sum_dv / n as f64,
        median: quantile(0.5),
        p90: quantile(0.9),
        max: norms[n - 1],
        count: n,
    })
}

/// EPE of an estimated flow field against ground truth over the pixels
/// selected by `region` (both fields must be valid there).
pub fn epe<F: Fn(u32, u32) -> bool>(
    est: &FlowField,
    gt: &FlowField,
    region: F,
) -> Result<EpeStats, EvalError> {
    if est.width != gt.width || est.height != gt.height {
        return Err(EvalError::DimensionMismatch);
    }
    let mut norms = Vec::new();
    let (mut sum_du, mut sum_dv) = (0.0, 0.0);
    for v in 0..est.height {
        for u in 0..est.width {
            if !region(u, v) || !est.is_valid_at(u, v) || !gt.is_valid_at(u, v) {
                continue;
            }
            let d = est.get(u, v) - gt.get(u, v);
            norms.push(d.norm());
            sum_du += d.du.abs();
            sum_dv += d.dv.abs();
        }
    }
    epe_from_errors(norms, sum_du, sum_dv)
}

/// EPE over explicit (estimate, truth) flow pairs.
pub fn epe_points(pairs: &[(FlowVector, FlowVector)]) -> Result<EpeStats, EvalError> {
    let mut norms = Vec::with_capacity(pairs.len());
    let (mut sum_du, mut sum_dv) = (0.0, 0.0);
    for (est, gt) in pairs {
        let d = *est - *gt;
        norms.push(d.norm());
        sum_du += d.du.abs();
        sum_dv += d.dv.abs();
    }
    epe_from_errors(norms, sum_du, sum_dv)
}

/// Mean accumulator whose merge is associative, so chunked and whole-run
/// aggregation agree exactly.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct MeanAccumulator {
    pub sum: f64,
    pub count: usize,
}

impl MeanAccumulator {
    pub fn push(&mut self, value: f64) {
        self.sum += value;
        self.count += 1;
    }

    pub fn push_weighted(&mut self, sum: f64, count: usize) {
        self.sum += sum;
        self.count += count;
    }

    pub fn merge(&mut self, other: &MeanAccumulator) {
        self.sum += other.sum;
        self.count += other.count;
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

// ---- Report assembly ----

#[derive(Debug, Clone, Serialize)]
pub struct FramePoseError {
    pub frame: usize,
    pub translation_m: f64,
    pub rotation_deg: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MotionErrorSummary {
    pub per_frame: Vec<FramePoseError>,
    pub mean_translation_m: Option<f64>,
    pub mean_rotation_deg: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ObjectFrameError {
    pub frame: usize,
    pub translation_m: f64,
    pub rotation_deg: f64,
    pub velocity_est_kmh: Option<f64>,
    pub velocity_gt_kmh: Option<f64>,
    pub velocity_error_kmh: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Default)]
pub struct ObjectErrorSummary {
    pub per_frame: Vec<ObjectFrameError>,
    pub mean_translation_m: Option<f64>,
    pub mean_rotation_deg: Option<f64>,
    pub mean_velocity_error_kmh: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VelocitySummary {
    /// Mean velocity error per track label.
    pub per_track: BTreeMap<u32, f64>,
    /// Unweighted mean of the per-track means.
    pub mean_over_tracks: Option<f64>,
    /// Mean over all per-frame velocity errors (frame-weighted).
    pub mean_over_frames: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Default)]
pub struct FlowSummary {
    pub static_before: Option<f64>,
    pub static_after: Option<f64>,
    pub object_before: Option<f64>,
    pub object_after: Option<f64>,
}

/// Dynamic/static confusion counts, ground-truth dynamic as positive.
#[derive(Debug, Clone, Serialize, Default)]
pub struct ClassificationCounts {
    pub true_dynamic: usize,
    pub true_static: usize,
    pub false_dynamic: usize,
    pub false_static: usize,
}

impl ClassificationCounts {
    pub fn accuracy(&self) -> Option<f64> {
        let total = self.true_dynamic + self.true_static + self.false_dynamic + self.false_static;
        (total > 0).then(|| (self.true_dynamic + self.true_static) as f64 / total as f64)
    }
}

/// Deterministic run counters (solver work, point counts). Wall-clock
/// timing is deliberately kept out so reports are byte-stable across runs.
#[derive(Debug, Clone, Serialize, Default)]
pub struct Counters {
    pub frames: usize,
    pub camera_iterations: usize,
    pub camera_points: usize,
    pub objects_estimated: usize,
    pub objects_tracked: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    /// Full configuration echo, defaults included.
    pub config: PipelineConfig,
    pub period: f64,
    pub camera: Option<MotionErrorSummary>,
    /// Per tracking label, when ground truth is available.
    pub objects: BTreeMap<u32, ObjectErrorSummary>,
    pub velocity: Option<VelocitySummary>,
    pub flow: FlowSummary,
    pub classification: Option<ClassificationCounts>,
    pub counters: Counters,
}

/// Builds the evaluation report for a processed sequence. Ground truth is
/// optional; without it the report carries flow statistics and counters
/// only.
pub fn build_report(
    results: &[FrameResult],
    gt: Option<&GroundTruth>,
    cfg: &PipelineConfig,
    period: f64,
) -> Report {
    let mut counters = Counters { frames: results.len(), ..Counters::default() };
    let mut static_before = MeanAccumulator::default();
    let mut static_after = MeanAccumulator::default();
    let mut object_before = MeanAccumulator::default();
    let mut object_after = MeanAccumulator::default();

    for fr in results {
        counters.camera_iterations += fr.camera.iterations;
        counters.camera_points += fr.camera.points;
        if let Some(s) = &fr.static_flow {
            static_before.push_weighted(s.before * s.count as f64, s.count);
            if let Some(a) = s.after {
                static_after.push_weighted(a * s.count as f64, s.count);
            }
        }
        for obj in &fr.objects {
            if obj.estimated {
                counters.objects_estimated += 1;
            }
            if obj.label != 0 {
                counters.objects_tracked += 1;
            }
            if let Some(s) = &obj.flow_epe {
                object_before.push_weighted(s.before * s.count as f64, s.count);
                if let Some(a) = s.after {
                    object_after.push_weighted(a * s.count as f64, s.count);
                }
            }
        }
    }
    let flow = FlowSummary {
        static_before: static_before.mean(),
        static_after: static_after.mean(),
        object_before: object_before.mean(),
        object_after: object_after.mean(),
    };

    let (camera, objects, velocity, classification) = match gt {
        Some(gt) => {
            let mut cam_frames = Vec::new();
            let mut cam_t = MeanAccumulator::default();
            let mut cam_r = MeanAccumulator::default();
            let mut objs: BTreeMap<u32, ObjectErrorSummary> = BTreeMap::new();
            let mut track_err: BTreeMap<u32, MeanAccumulator> = BTreeMap::new();
            let mut frame_err = MeanAccumulator::default();
            let mut counts = ClassificationCounts::default();

            for fr in results {
                if let Some(gt_motion) = gt.camera_motion(fr.frame_index) {
                    let e = pose_change_error(&fr.camera.motion, &gt_motion);
                    cam_t.push(e.translation_m);
                    cam_r.push(e.rotation_deg);
                    cam_frames.push(FramePoseError {
                        frame: fr.frame_index,
                        translation_m: e.translation_m,
                        rotation_deg: e.rotation_deg,
                    });
                }
                for obj in &fr.objects {
                    if let Some(gt_dynamic) = gt.object_is_dynamic(fr.frame_index, obj.instance_id)
                    {
                        let said_dynamic = obj.classification == crate::dynamics::MotionClass::Dynamic;
                        match (gt_dynamic, said_dynamic) {
                            (true, true) => counts.true_dynamic += 1,
                            (false, false) => counts.true_static += 1,
                            (false, true) => counts.false_dynamic += 1,
                            (true, false) => counts.false_static += 1,
                        }
                    }
                    let Some(est_motion) = obj.motion else { continue };
                    let Some(gt_motion) =
                        gt.object_motion_camera_frame(fr.frame_index, obj.instance_id)
                    else {
                        continue;
                    };
                    let e = pose_change_error(&est_motion, &gt_motion);
                    let gt_vel = gt.object_velocity(fr.frame_index, obj.instance_id, period);
                    let vel_err = match (obj.velocity_kmh, gt_vel) {
                        (Some(est), Some(truth)) => Some(velocity_error(est, truth)),
                        _ => None,
                    };
                    if let Some(err) = vel_err {
                        track_err.entry(obj.label).or_default().push(err);
                        frame_err.push(err);
                    }
                    let summary = objs.entry(obj.label).or_default();
                    summary.per_frame.push(ObjectFrameError {
                        frame: fr.frame_index,
                        translation_m: e.translation_m,
                        rotation_deg: e.rotation_deg,
                        velocity_est_kmh: obj.velocity_kmh,
                        velocity_gt_kmh: gt_vel,
                        velocity_error_kmh: vel_err,
                    });
                }
            }

            for summary in objs.values_mut() {
                let mut t = MeanAccumulator::default();
                let mut r = MeanAccumulator::default();
                let mut v = MeanAccumulator::default();
                for f in &summary.per_frame {
                    t.push(f.translation_m);
                    r.push(f.rotation_deg);
                    if let Some(e) = f.velocity_error_kmh {
                        v.push(e);
                    }
                }
                summary.mean_translation_m = t.mean();
                summary.mean_rotation_deg = r.mean();
                summary.mean_velocity_error_kmh = v.mean();
            }

            let per_track: BTreeMap<u32, f64> = track_err
                .iter()
                .filter_map(|(&l, acc)| acc.mean().map(|m| (l, m)))
                .collect();
            let mut over_tracks = MeanAccumulator::default();
            for m in per_track.values() {
                over_tracks.push(*m);
            }
            (
                Some(MotionErrorSummary {
                    per_frame: cam_frames,
                    mean_translation_m: cam_t.mean(),
                    mean_rotation_deg: cam_r.mean(),
                }),
                objs,
                Some(VelocitySummary {
                    per_track,
                    mean_over_tracks: over_tracks.mean(),
                    mean_over_frames: frame_err.mean(),
                }),
                Some(counts),
            )
        }
        None => (None, BTreeMap::new(), None, None),
    };

    Report {
        config: *cfg,
        period,
        camera,
        objects,
        velocity,
        flow,
        classification,
        counters,
    }
}
