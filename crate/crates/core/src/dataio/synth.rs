//! Synthetic dynamic-scene generator with exact ground truth.
//!
//! Scenes are a ground plane plus rigid boxes on scripted SE(3)
//! trajectories, rendered by analytic ray intersection rather than
//! rasterization, so depth, flow, and masks are exact to raster (f32)
//! precision and every motion equation holds on the output. Rays are
//! parameterized with unit z in the camera frame, so the intersection
//! parameter is the stored depth directly.
//!
//! Flow for the pair (k-1, k) is stored in frame k and indexed on the k-1
//! pixel grid; it is the geometric displacement of the surface point seen
//! at k-1, defined even where that point becomes occluded at k.

use super::manifest::{
    write_camera_poses, write_object_poses, FrameEntry, GroundTruth, GtObjectFrame,
    SequenceManifest,
};
use super::DataError;
use crate::dataio::{DepthMap, FlowField, InstanceMask};
use crate::geometry::{project, se3_exp, ImagePoint, Intrinsics, Point3, SE3Pose, Twist};
use crate::pipeline::Frame;
use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectScript {
    /// Box edge lengths in the body frame (x, y, z), meters.
    pub extent: [f64; 3],
    /// Initial box-center position in the world frame.
    pub position: [f64; 3],
    /// Initial yaw about the world y axis, degrees.
    #[serde(default)]
    pub yaw_deg: f64,
    /// Body-fixed twist applied per frame step; cycles when shorter than
    /// the sequence. Empty means the object is parked.
    #[serde(default)]
    pub motion: Vec<[f64; 6]>,
}

/// Script for a camera and a set of rigid boxes over a ground plane. The
/// world frame coincides with the camera frame at frame 0 (x right, y down,
/// z forward), so the ground plane sits at positive `ground_plane_y`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    /// Default noise seed recorded with the scene.
    #[serde(default)]
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    pub f: f64,
    pub cu: f64,
    pub cv: f64,
    pub period: f64,
    pub frame_count: usize,
    pub ground_plane_y: f64,
    /// Camera twist applied per frame step; cycles. Empty = static camera.
    #[serde(default)]
    pub camera_motion: Vec<[f64; 6]>,
    #[serde(default)]
    pub objects: Vec<ObjectScript>,
    /// Static boxes rendered as part of the background (mask id 0): walls
    /// and buildings a semantic front end would never segment as movable.
    #[serde(default)]
    pub background_boxes: Vec<ObjectScript>,
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        Intrinsics::new(self.f, self.cu, self.cv, self.width, self.height)
            .map_err(|e| DataError::Validation(e.to_string()))?;
        if !(self.period > 0.0) {
            return Err(DataError::Validation(format!(
                "period must be positive, got {}",
                self.period
            )));
        }
        if self.frame_count == 0 {
            return Err(DataError::Validation("frame_count must be at least 1".into()));
        }
        for (i, obj) in self.objects.iter().chain(self.background_boxes.iter()).enumerate() {
            if obj.extent.iter().any(|&e| !(e > 0.0)) {
                return Err(DataError::Validation(format!(
                    "object {i} extent must be positive, got {:?}",
                    obj.extent
                )));
            }
        }
        for (i, b) in self.background_boxes.iter().enumerate() {
            if !b.motion.is_empty() {
                return Err(DataError::Validation(format!(
                    "background box {i} cannot move; use `objects` for dynamic bodies"
                )));
            }
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        let spec: Self = serde_json::from_str(&text)
            .map_err(|e| DataError::Parse { path: path.to_path_buf(), line: e.line(), msg: e.to_string() })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json_file(&self, path: &Path) -> Result<(), DataError> {
        let text = serde_json::to_string_pretty(self).expect("spec serializes");
        std::fs::write(path, text).map_err(|e| DataError::io(path, e))
    }
}

pub struct SyntheticSequence {
    pub intrinsics: Intrinsics,
    pub period: f64,
    pub frames: Vec<Frame>,
    pub ground_truth: GroundTruth,
}

#[derive(Clone, Copy)]
struct Hit {
    /// Scripted object index, or None for the ground plane.
    object: Option<usize>,
    /// Ray parameter == camera-frame depth.
    s: f64,
}

/// Entry parameter of a ray against an axis-aligned box centered at the
/// body origin, or None if it misses.
fn ray_box(o: &Vector3<f64>, d: &Vector3<f64>, half: &Vector3<f64>) -> Option<f64> {
    let mut tmin = f64::NEG_INFINITY;
    let mut tmax = f64::INFINITY;
    for a in 0..3 {
        if d[a].abs() < 1e-15 {
            if o[a].abs() > half[a] {
                return None;
            }
        } else {
            let t1 = (-half[a] - o[a]) / d[a];
            let t2 = (half[a] - o[a]) / d[a];
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            tmin = tmin.max(lo);
            tmax = tmax.min(hi);
        }
    }
    (tmax >= tmin && tmin > 1e-9).then_some(tmin)
}

/// Renders the scripted scene to frames plus its exact ground truth.
pub fn generate_synthetic(spec: &SyntheticSceneSpec) -> Result<SyntheticSequence, DataError> {
    spec.validate()?;
    let k = Intrinsics::new(spec.f, spec.cu, spec.cv, spec.width, spec.height)
        .map_err(|e| DataError::Validation(e.to_string()))?;
    let n = spec.frame_count;

    // Pose chains. Step twists cycle over their script.
    let mut camera = vec![SE3Pose::identity()];
    for step in 1..n {
        let motion = if spec.camera_motion.is_empty() {
            SE3Pose::identity()
        } else {
            se3_exp(&Twist::from_array(spec.camera_motion[(step - 1) % spec.camera_motion.len()]))
        };
        let next = camera[step - 1] * motion;
        camera.push(next);
    }
    let mut object_poses: Vec<Vec<SE3Pose>> = Vec::new();
    for obj in &spec.objects {
        let yaw = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), obj.yaw_deg.to_radians());
        let l0 = SE3Pose::from_quaternion(yaw, Vector3::from(obj.position));
        let mut chain = vec![l0];
        for step in 1..n {
            let motion = if obj.motion.is_empty() {
                SE3Pose::identity()
            } else {
                se3_exp(&Twist::from_array(obj.motion[(step - 1) % obj.motion.len()]))
            };
            let next = chain[step - 1] * motion;
            chain.push(next);
        }
        object_poses.push(chain);
    }
    let halves: Vec<Vector3<f64>> =
        spec.objects.iter().map(|o| Vector3::from(o.extent) / 2.0).collect();
    // Background boxes never move; their inverse poses are fixed.
    let background: Vec<(SE3Pose, Vector3<f64>)> = spec
        .background_boxes
        .iter()
        .map(|b| {
            let yaw = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), b.yaw_deg.to_radians());
            let pose = SE3Pose::from_quaternion(yaw, Vector3::from(b.position));
            (pose.inverse(), Vector3::from(b.extent) / 2.0)
        })
        .collect();

    let (w, h) = (spec.width, spec.height);
    let mut frames: Vec<Frame> = Vec::new();
    let mut gt_objects: Vec<GtObjectFrame> = Vec::new();
    let mut prev_hits: Option<Vec<Option<Hit>>> = None;

    for frame_k in 0..n {
        let cam = camera[frame_k];
        let cam_rot = cam.rotation();
        let origin = cam.translation();
        let inv_poses: Vec<SE3Pose> = object_poses.iter().map(|c| c[frame_k].inverse()).collect();

        let mut hits: Vec<Option<Hit>> = vec![None; (w * h) as usize];
        let mut depth = DepthMap::new(w, h);
        for v in 0..h {
            for u in 0..w {
                let dir_cam =
                    Vector3::new((u as f64 - k.cu) / k.f, (v as f64 - k.cv) / k.f, 1.0);
                let dir = cam_rot * dir_cam;
                let mut best: Option<Hit> = None;
                // ground plane y = ground_plane_y
                if dir.y.abs() > 1e-15 {
                    let s = (spec.ground_plane_y - origin.y) / dir.y;
                    if s > 1e-9 {
                        best = Some(Hit { object: None, s });
                    }
                }
                for (inv, half) in &background {
                    let ob = inv.apply(&Point3::from(origin));
                    let db = inv.apply_vector(&dir);
                    if let Some(s) = ray_box(&ob.coords, &db, half) {
                        if best.map(|b| s < b.s).unwrap_or(true) {
                            best = Some(Hit { object: None, s });
                        }
                    }
                }
                for (idx, inv) in inv_poses.iter().enumerate() {
                    let ob = inv.apply(&Point3::from(origin));
                    let db = inv.apply_vector(&dir);
                    if let Some(s) = ray_box(&ob.coords, &db, &halves[idx]) {
                        if best.map(|b| s < b.s).unwrap_or(true) {
                            best = Some(Hit { object: Some(idx), s });
                        }
                    }
                }
                if let Some(hit) = best {
                    depth.set(u, v, hit.s as f32);
                    hits[(v * w + u) as usize] = Some(hit);
                }
            }
        }

        // Per-frame contiguous instance ids, in scripted object order.
        let mut visible: Vec<usize> = Vec::new();
        for hit in hits.iter().flatten() {
            if let Some(idx) = hit.object {
                if !visible.contains(&idx) {
                    visible.push(idx);
                }
            }
        }
        visible.sort_unstable();
        let instance_of = |idx: usize| -> u16 {
            visible.iter().position(|&x| x == idx).map(|p| (p + 1) as u16).unwrap_or(0)
        };
        let mut mask = InstanceMask::new(w, h);
        for v in 0..h {
            for u in 0..w {
                if let Some(Hit { object: Some(idx), .. }) = hits[(v * w + u) as usize] {
                    mask.set(u, v, instance_of(idx));
                }
            }
        }
        for (idx, chain) in object_poses.iter().enumerate() {
            gt_objects.push(GtObjectFrame {
                frame: frame_k,
                object: (idx + 1) as u32,
                instance_id: instance_of(idx),
                pose: chain[frame_k],
            });
        }

        // Flow k-1 -> k on the k-1 grid, from the previous frame's hits.
        let flow = if frame_k == 0 {
            None
        } else {
            let prev = prev_hits.as_ref().expect("set after first frame");
            let prev_cam = camera[frame_k - 1];
            let prev_rot = prev_cam.rotation();
            let prev_origin = prev_cam.translation();
            let cam_inv = cam.inverse();
            let mut field = FlowField::new(w, h);
            for v in 0..h {
                for u in 0..w {
                    let Some(hit) = prev[(v * w + u) as usize] else { continue };
                    let dir_cam =
                        Vector3::new((u as f64 - k.cu) / k.f, (v as f64 - k.cv) / k.f, 1.0);
                    let x_prev = prev_origin + (prev_rot * dir_cam) * hit.s;
                    let x_now = match hit.object {
                        Some(idx) => {
                            let body = object_poses[idx][frame_k - 1]
                                .inverse()
                                .apply(&Point3::from(x_prev));
                            object_poses[idx][frame_k].apply(&body).coords
                        }
                        None => x_prev,
                    };
                    let m_k = cam_inv.apply(&Point3::from(x_now));
                    if m_k.z <= 1e-9 {
                        continue; // leaves the view frustum; no defined flow
                    }
                    let p_now = project(&m_k, &k).expect("z checked");
                    field.set(u, v, p_now - ImagePoint::new(u as f64, v as f64));
                }
            }
            Some(field)
        };

        frames.push(Frame {
            index: frame_k,
            depth,
            flow,
            mask,
            intrinsics: k,
            period: spec.period,
        });
        prev_hits = Some(hits);
    }

    Ok(SyntheticSequence {
        intrinsics: k,
        period: spec.period,
        frames,
        ground_truth: GroundTruth { camera, objects: gt_objects },
    })
}

/// Writes a generated sequence to `dir` in the manifest/raster formats and
/// returns the manifest path.
pub fn write_sequence(seq: &SyntheticSequence, dir: &Path) -> Result<PathBuf, DataError> {
    for sub in ["depth", "flow", "mask", "gt"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| DataError::io(&dir.join(sub), e))?;
    }
    let mut entries = Vec::new();
    for frame in &seq.frames {
        let k = frame.index;
        let depth_rel = PathBuf::from(format!("depth/{k:06}.bin"));
        frame.depth.write_to(&dir.join(&depth_rel))?;
        let flow_rel = match &frame.flow {
            Some(flow) => {
                let rel = PathBuf::from(format!("flow/{k:06}.bin"));
                flow.write_to(&dir.join(&rel))?;
                Some(rel)
            }
            None => None,
        };
        let mask_rel = PathBuf::from(format!("mask/{k:06}.bin"));
        frame.mask.write_to(&dir.join(&mask_rel))?;
        entries.push(FrameEntry { index: k, depth: depth_rel, flow: flow_rel, mask: mask_rel });
    }
    write_camera_poses(&dir.join("gt/camera.txt"), &seq.ground_truth.camera)?;
    write_object_poses(&dir.join("gt/objects.txt"), &seq.ground_truth.objects)?;
    let manifest = SequenceManifest {
        intrinsics: seq.intrinsics,
        period: seq.period,
        frames: entries,
        camera_poses: Some(PathBuf::from("gt/camera.txt")),
        object_poses: Some(PathBuf::from("gt/objects.txt")),
        base_dir: dir.to_path_buf(),
    };
    let manifest_path = dir.join("manifest.txt");
    manifest.save(&manifest_path)?;
    Ok(manifest_path)
}
