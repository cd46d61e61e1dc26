//! Sequence manifests, pose text files, and ground-truth bookkeeping.
//!
//! A manifest is a plain text file:
//!
//! ```text
//! MBVO-MANIFEST v1
//! f 600
//! cu 320
//! cv 240
//! width 640
//! height 480
//! period 0.1
//! camera_poses gt/camera.txt
//! object_poses gt/objects.txt
//! frames 3
//! 0 depth/000000.bin - mask/000000.bin
//! 1 depth/000001.bin flow/000001.bin mask/000001.bin
//! 2 depth/000002.bin flow/000002.bin mask/000002.bin
//! ```
//!
//! Paths are relative to the manifest's directory. Frame 0 carries no flow
//! (`-`). `camera_poses`/`object_poses` are optional. Calibration may also
//! be given as `fx`/`fy`; the two must agree within 0.1%.
//!
//! Pose files hold one line per frame: the frame index followed by the 12
//! row-major values of the 3x4 [R | t] matrix (camera-to-world). Object
//! pose files prepend the object id and its instance id in that frame's
//! mask (0 while invisible): `frame object instance r00 ... tz`.

use super::{DataError, DepthMap, FlowField, InstanceMask};
use crate::geometry::{Intrinsics, SE3Pose};
use crate::pipeline::Frame;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct FrameEntry {
    pub index: usize,
    pub depth: PathBuf,
    pub flow: Option<PathBuf>,
    pub mask: PathBuf,
}

#[derive(Debug, Clone)]
pub struct SequenceManifest {
    pub intrinsics: Intrinsics,
    pub period: f64,
    pub frames: Vec<FrameEntry>,
    pub camera_poses: Option<PathBuf>,
    pub object_poses: Option<PathBuf>,
    /// Directory all relative paths resolve against.
    pub base_dir: PathBuf,
}

const MANIFEST_MAGIC: &str = "MBVO-MANIFEST v1";

impl SequenceManifest {
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        let base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let err = |line: usize, msg: String| DataError::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };

        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, first)) if first.trim() == MANIFEST_MAGIC => {}
            _ => return Err(err(1, format!("expected `{MANIFEST_MAGIC}` header"))),
        }

        let mut f = None;
        let mut fx = None;
        let mut fy = None;
        let mut cu = None;
        let mut cv = None;
        let mut width = None;
        let mut height = None;
        let mut period = None;
        let mut camera_poses = None;
        let mut object_poses = None;
        let mut frame_count: Option<usize> = None;
        let mut frames: Vec<FrameEntry> = Vec::new();

        for (lineno, raw) in lines {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if frame_count.is_some() {
                let parts: Vec<&str> = line.split_whitespace().collect();
                if parts.len() != 4 {
                    return Err(err(lineno + 1, "frame line needs: index depth flow mask".into()));
                }
                let index: usize = parts[0]
                    .parse()
                    .map_err(|_| err(lineno + 1, format!("bad frame index `{}`", parts[0])))?;
                if index != frames.len() {
                    return Err(err(
                        lineno + 1,
                        format!("frame indices must be consecutive from 0, got {index}"),
                    ));
                }
                let flow = if parts[2] == "-" { None } else { Some(PathBuf::from(parts[2])) };
                if index == 0 && flow.is_some() {
                    return Err(err(lineno + 1, "frame 0 cannot carry a flow field".into()));
                }
                if index > 0 && flow.is_none() {
                    return Err(err(lineno + 1, format!("frame {index} is missing its flow field")));
                }
                frames.push(FrameEntry {
                    index,
                    depth: PathBuf::from(parts[1]),
                    flow,
                    mask: PathBuf::from(parts[3]),
                });
                continue;
            }
            let (key, value) = line
                .split_once(char::is_whitespace)
                .ok_or_else(|| err(lineno + 1, format!("expected `key value`, got `{line}`")))?;
            let value = value.trim();
            let parse_f64 = |v: &str| {
                v.parse::<f64>()
                    .map_err(|_| err(lineno + 1, format!("bad number `{v}` for `{key}`")))
            };
            match key {
                "f" => f = Some(parse_f64(value)?),
                "fx" => fx = Some(parse_f64(value)?),
                "fy" => fy = Some(parse_f64(value)?),
                "cu" => cu = Some(parse_f64(value)?),
                "cv" => cv = Some(parse_f64(value)?),
                "width" => width = Some(parse_f64(value)? as u32),
                "height" => height = Some(parse_f64(value)? as u32),
                "period" => period = Some(parse_f64(value)?),
                "camera_poses" => camera_poses = Some(PathBuf::from(value)),
                "object_poses" => object_poses = Some(PathBuf::from(value)),
                "frames" => {
                    frame_count = Some(value.parse().map_err(|_| {
                        err(lineno + 1, format!("bad frame count `{value}`"))
                    })?)
                }
                other => return Err(err(lineno + 1, format!("unknown key `{other}`"))),
            }
        }

        let focal = match (f, fx, fy) {
            (Some(f), None, None) => f,
            (None, Some(fx), Some(fy)) => {
                if (fx - fy).abs() > 1e-3 * fx.abs() {
                    return Err(DataError::Validation(format!(
                        "fx = {fx} and fy = {fy} differ by more than 0.1%; a single shared focal length is required"
                    )));
                }
                0.5 * (fx + fy)
            }
            _ => {
                return Err(DataError::Validation(
                    "calibration needs either `f` or both `fx` and `fy`".into(),
                ))
            }
        };
        let missing = |name: &str| DataError::Validation(format!("manifest is missing `{name}`"));
        let intrinsics = Intrinsics::new(
            focal,
            cu.ok_or_else(|| missing("cu"))?,
            cv.ok_or_else(|| missing("cv"))?,
            width.ok_or_else(|| missing("width"))?,
            height.ok_or_else(|| missing("height"))?,
        )
        .map_err(|e| DataError::Validation(e.to_string()))?;
        let period = period.ok_or_else(|| missing("period"))?;
        if !(period > 0.0) {
            return Err(DataError::Validation(format!("period must be positive, got {period}")));
        }
        let expected = frame_count.ok_or_else(|| missing("frames"))?;
        if frames.len() != expected {
            return Err(DataError::Validation(format!(
                "manifest declares {expected} frames but lists {}",
                frames.len()
            )));
        }

        Ok(Self { intrinsics, period, frames, camera_poses, object_poses, base_dir })
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut out = String::new();
        let k = &self.intrinsics;
        writeln!(out, "{MANIFEST_MAGIC}").unwrap();
        writeln!(out, "f {}", k.f).unwrap();
        writeln!(out, "cu {}", k.cu).unwrap();
        writeln!(out, "cv {}", k.cv).unwrap();
        writeln!(out, "width {}", k.width).unwrap();
        writeln!(out, "height {}", k.height).unwrap();
        writeln!(out, "period {}", self.period).unwrap();
        if let Some(p) = &self.camera_poses {
            writeln!(out, "camera_poses {}", p.display()).unwrap();
        }
        if let Some(p) = &self.object_poses {
            writeln!(out, "object_poses {}", p.display()).unwrap();
        }
        writeln!(out, "frames {}", self.frames.len()).unwrap();
        for fr in &self.frames {
            let flow = fr
                .flow
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "-".into());
            writeln!(out, "{} {} {} {}", fr.index, fr.depth.display(), flow, fr.mask.display())
                .unwrap();
        }
        std::fs::write(path, out).map_err(|e| DataError::io(path, e))
    }

    fn resolve(&self, rel: &Path) -> PathBuf {
        self.base_dir.join(rel)
    }

    pub fn load_frame(&self, index: usize) -> Result<Frame, DataError> {
        let entry = &self.frames[index];
        let depth_path = self.resolve(&entry.depth);
        let depth = DepthMap::read_from(&depth_path)?;
        let check = |w: u32, h: u32, path: &Path| {
            let k = &self.intrinsics;
            if w != k.width || h != k.height {
                Err(DataError::DimensionMismatch {
                    path: path.to_path_buf(),
                    want_w: k.width,
                    want_h: k.height,
                    got_w: w,
                    got_h: h,
                })
            } else {
                Ok(())
            }
        };
        check(depth.width, depth.height, &depth_path)?;
        let flow = match &entry.flow {
            Some(rel) => {
                let path = self.resolve(rel);
                let flow = FlowField::read_from(&path)?;
                check(flow.width, flow.height, &path)?;
                Some(flow)
            }
            None => None,
        };
        let mask_path = self.resolve(&entry.mask);
        let mask = InstanceMask::read_from(&mask_path)?;
        check(mask.width, mask.height, &mask_path)?;
        Ok(Frame {
            index,
            depth,
            flow,
            mask,
            intrinsics: self.intrinsics,
            period: self.period,
        })
    }

    /// Frames in index order, decoded lazily.
    pub fn stream(&self) -> impl Iterator<Item = Result<Frame, DataError>> + '_ {
        (0..self.frames.len()).map(|i| self.load_frame(i))
    }

    pub fn ground_truth(&self) -> Result<Option<GroundTruth>, DataError> {
        let Some(cam_rel) = &self.camera_poses else { return Ok(None) };
        let camera = read_camera_poses(&self.resolve(cam_rel))?;
        let objects = match &self.object_poses {
            Some(rel) => read_object_poses(&self.resolve(rel))?,
            None => Vec::new(),
        };
        Ok(Some(GroundTruth { camera, objects }))
    }
}

/// Loads all frames of a sequence eagerly.
pub fn load_sequence(manifest: &SequenceManifest) -> Result<Vec<Frame>, DataError> {
    manifest.stream().collect()
}

#[derive(Debug, Clone)]
pub struct GtObjectFrame {
    pub frame: usize,
    pub object: u32,
    /// Instance id in that frame's mask; 0 while the object is not visible.
    pub instance_id: u16,
    /// Object-to-world pose L_k.
    pub pose: SE3Pose,
}

/// Scripted ground truth: camera-to-world poses per frame and per-frame
/// object poses with their mask instance ids.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub camera: Vec<SE3Pose>,
    pub objects: Vec<GtObjectFrame>,
}

impl GroundTruth {
    /// Camera motion from frame k-1 to k in the k-1 body frame:
    /// T = C_{k-1}^-1 * C_k.
    pub fn camera_motion(&self, k: usize) -> Option<SE3Pose> {
        if k == 0 || k >= self.camera.len() {
            return None;
        }
        Some(self.camera[k - 1].inverse() * self.camera[k])
    }

    fn find(&self, frame: usize, instance: u16) -> Option<&GtObjectFrame> {
        if instance == 0 {
            return None;
        }
        self.objects.iter().find(|o| o.frame == frame && o.instance_id == instance)
    }

    fn find_object(&self, frame: usize, object: u32) -> Option<&GtObjectFrame> {
        self.objects.iter().find(|o| o.frame == frame && o.object == object)
    }

    /// World-frame point motion of the object visible as `instance` in
    /// frame k: H_w = L_k * L_{k-1}^-1.
    pub fn object_motion_world(&self, k: usize, instance: u16) -> Option<SE3Pose> {
        let rec = self.find(k, instance)?;
        let prev = self.find_object(k.checked_sub(1)?, rec.object)?;
        Some(rec.pose * prev.pose.inverse())
    }

    /// The same motion conjugated into the k-1 camera frame, matching the
    /// frame the pipeline reports H in.
    pub fn object_motion_camera_frame(&self, k: usize, instance: u16) -> Option<SE3Pose> {
        let h_world = self.object_motion_world(k, instance)?;
        let cam_prev = self.camera.get(k - 1)?;
        Some(cam_prev.inverse() * h_world * *cam_prev)
    }

    /// Ground-truth speed in km/h: displacement of the body origin over one
    /// frame. Pure translations make this independent of the reference
    /// point, matching the estimator's sampled-centroid definition.
    pub fn object_velocity(&self, k: usize, instance: u16, period: f64) -> Option<f64> {
        let rec = self.find(k, instance)?;
        let prev = self.find_object(k.checked_sub(1)?, rec.object)?;
        let h_world = rec.pose * prev.pose.inverse();
        let c = prev.pose.translation();
        let moved = h_world.apply(&crate::geometry::Point3::from(c)).coords - c;
        Some(moved.norm() * 3.6 / period)
    }

    /// Whether the object actually moved between k-1 and k (body-fixed
    /// motion differs from identity).
    pub fn object_is_dynamic(&self, k: usize, instance: u16) -> Option<bool> {
        let rec = self.find(k, instance)?;
        let prev = self.find_object(k.checked_sub(1)?, rec.object)?;
        let body = prev.pose.inverse() * rec.pose;
        Some(body.translation().norm() > 1e-9 || body.rotation_angle() > 1e-9)
    }
}

pub fn write_camera_poses(path: &Path, poses: &[SE3Pose]) -> Result<(), DataError> {
    let mut out = String::new();
    for (k, pose) in poses.iter().enumerate() {
        write!(out, "{k}").unwrap();
        for v in pose.to_matrix_3x4() {
            write!(out, " {v}").unwrap();
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| DataError::io(path, e))
}

pub fn read_camera_poses(path: &Path) -> Result<Vec<SE3Pose>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let mut poses = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let err = |msg: String| DataError::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg,
        };
        if parts.len() != 13 {
            return Err(err(format!("expected frame index + 12 values, got {}", parts.len())));
        }
        let index: usize =
            parts[0].parse().map_err(|_| err(format!("bad frame index `{}`", parts[0])))?;
        if index != poses.len() {
            return Err(err(format!("pose lines must be consecutive from 0, got {index}")));
        }
        let mut m = [0.0f64; 12];
        for (i, p) in parts[1..].iter().enumerate() {
            m[i] = p.parse().map_err(|_| err(format!("bad number `{p}`")))?;
        }
        poses.push(
            SE3Pose::from_matrix_3x4(&m).map_err(|e| err(format!("invalid pose: {e}")))?,
        );
    }
    Ok(poses)
}

pub fn write_object_poses(path: &Path, objects: &[GtObjectFrame]) -> Result<(), DataError> {
    let mut out = String::new();
    for rec in objects {
        write!(out, "{} {} {}", rec.frame, rec.object, rec.instance_id).unwrap();
        for v in rec.pose.to_matrix_3x4() {
            write!(out, " {v}").unwrap();
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| DataError::io(path, e))
}

pub fn read_object_poses(path: &Path) -> Result<Vec<GtObjectFrame>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let err = |msg: String| DataError::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg,
        };
        if parts.len() != 15 {
            return Err(err(format!(
                "expected frame, object, instance + 12 values, got {}",
                parts.len()
            )));
        }
        let frame: usize = parts[0].parse().map_err(|_| err("bad frame".into()))?;
        let object: u32 = parts[1].parse().map_err(|_| err("bad object id".into()))?;
        let instance_id: u16 = parts[2].parse().map_err(|_| err("bad instance id".into()))?;
        let mut m = [0.0f64; 12];
        for (i, p) in parts[3..].iter().enumerate() {
            m[i] = p.parse().map_err(|_| err(format!("bad number `{p}`")))?;
        }
        records.push(GtObjectFrame {
            frame,
            object,
            instance_id,
            pose: SE3Pose::from_matrix_3x4(&m).map_err(|e| err(format!("invalid pose: {e}")))?,
        });
    }
    Ok(records)
}
