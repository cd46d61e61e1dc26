//! Scene flow, dynamic/static object classification, and cross-frame object
//! identity via optical-flow label propagation.

use crate::dataio::{FlowField, InstanceMask};
use crate::eval::object_velocity;
use crate::geometry::{Point3, SE3Pose};
use nalgebra::Vector3;
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

/// 3D displacement of a point after compensating camera motion; zero for
/// static structure.
pub type SceneFlowVector = Vector3<f64>;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("cannot classify an object with no scene-flow samples")]
    EmptyFlowList,
    #[error("frame period must be positive, got {0}")]
    InvalidPeriod(f64),
}

/// Scene flow of one correspondence: f = m_prev - T * m_curr, with T the
/// estimated camera motion and both points in their own camera frames.
pub fn compute_scene_flow(m_prev: &Point3, m_curr: &Point3, camera_motion: &SE3Pose) -> SceneFlowVector {
    m_prev.coords - camera_motion.apply(m_curr).coords
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum MotionClass {
    Dynamic,
    Static,
}

/// An object is dynamic when the fraction of its points with scene-flow
/// magnitude above `mag_threshold` exceeds `dyn_proportion`.
pub fn classify_object(
    flows: &[SceneFlowVector],
    mag_threshold: f64,
    dyn_proportion: f64,
) -> Result<MotionClass, DynamicsError> {
    if flows.is_empty() {
        return Err(DynamicsError::EmptyFlowList);
    }
    let moving = flows.iter().filter(|f| f.norm() > mag_threshold).count();
    if (moving as f64 / flows.len() as f64) > dyn_proportion {
        Ok(MotionClass::Dynamic)
    } else {
        Ok(MotionClass::Static)
    }
}

/// Persistent tracking labels. Label 0 is reserved for static objects and
/// background; fresh labels count up from 1 and are never reused.
#[derive(Debug, Clone, Default)]
pub struct TrackLabelSet {
    next_label: u32,
    /// Instance id in the current frame -> persistent label.
    active: BTreeMap<u16, u32>,
}

impl TrackLabelSet {
    pub fn new() -> Self {
        Self { next_label: 1, active: BTreeMap::new() }
    }

    /// Label of a frame instance; 0 when the instance carries no label.
    pub fn label_of(&self, instance: u16) -> u32 {
        if instance == 0 {
            0
        } else {
            self.active.get(&instance).copied().unwrap_or(0)
        }
    }

    pub fn active(&self) -> &BTreeMap<u16, u32> {
        &self.active
    }

    pub fn next_label(&self) -> u32 {
        self.next_label
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LabelAssignment {
    pub label: u32,
    /// Previous-frame instance that contributed the most correspondences
    /// (0 when the majority came from background).
    pub modal_prev_instance: u16,
    pub modal_votes: usize,
    pub total_votes: usize,
    /// Set when the object had no usable correspondences at all.
    pub no_correspondences: bool,
}

#[derive(Debug, Clone)]
pub struct LabelPropagation {
    pub labels: TrackLabelSet,
    /// Current-frame instance id -> assignment, one entry per instance.
    pub assignments: BTreeMap<u16, LabelAssignment>,
}

/// Propagates persistent labels from the k-1 mask onto the k mask along the
/// optical flow (defined on the k-1 pixel grid).
///
/// Every k-1 pixel with valid flow votes into the current instance its
/// flowed position (rounded to the nearest pixel) lands in, carrying the
/// persistent label of its k-1 instance (0 for background). Each current
/// instance takes its modal label. A modal label of 0 means the object is
/// new, reappearing, or previously static: it receives a fresh label if it
/// was classified dynamic, otherwise stays at 0. Ties between instances
/// claiming the same label go to the one with more votes.
pub fn propagate_labels(
    mask_prev: &InstanceMask,
    labels_prev: &TrackLabelSet,
    mask_curr: &InstanceMask,
    flow: &FlowField,
    dynamic_instances: &BTreeSet<u16>,
) -> LabelPropagation {
    let mut label_votes: BTreeMap<u16, BTreeMap<u32, usize>> = BTreeMap::new();
    let mut inst_votes: BTreeMap<u16, BTreeMap<u16, usize>> = BTreeMap::new();
    for id in mask_curr.instance_ids() {
        label_votes.entry(id).or_default();
        inst_votes.entry(id).or_default();
    }

    let (w, h) = (mask_prev.width, mask_prev.height);
    for v in 0..h {
        for u in 0..w {
            if !flow.is_valid_at(u, v) {
                continue;
            }
            let f = flow.get(u, v);
            let qu = (u as f64 + f.du).round();
            let qv = (v as f64 + f.dv).round();
            if qu < 0.0 || qv < 0.0 || qu >= w as f64 || qv >= h as f64 {
                continue;
            }
            let j = mask_curr.get(qu as u32, qv as u32);
            if j == 0 {
                continue;
            }
            let prev_instance = mask_prev.get(u, v);
            let prev_label = labels_prev.label_of(prev_instance);
            *label_votes.get_mut(&j).unwrap().entry(prev_label).or_insert(0) += 1;
            *inst_votes.get_mut(&j).unwrap().entry(prev_instance).or_insert(0) += 1;
        }
    }

    // Modal label per instance; ties resolved toward the smaller label so
    // the result is independent of vote order.
    struct Claim {
        instance: u16,
        modal_label: u32,
        modal_votes: usize,
        total_votes: usize,
        modal_prev_instance: u16,
    }
    let mut claims: Vec<Claim> = label_votes
        .iter()
        .map(|(&instance, votes)| {
            let total_votes: usize = votes.values().sum();
            let (modal_label, modal_votes) = votes
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(&l, &c)| (l, c))
                .unwrap_or((0, 0));
            let modal_prev_instance = inst_votes[&instance]
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(&i, _)| i)
                .unwrap_or(0);
            Claim { instance, modal_label, modal_votes, total_votes, modal_prev_instance }
        })
        .collect();

    // Nonzero labels are claimed strongest-first so no label is issued to
    // two concurrent objects.
    claims.sort_by(|a, b| b.modal_votes.cmp(&a.modal_votes).then(a.instance.cmp(&b.instance)));
    let mut next_label = labels_prev.next_label;
    let mut taken: BTreeSet<u32> = BTreeSet::new();
    let mut assignments: BTreeMap<u16, LabelAssignment> = BTreeMap::new();
    let mut active: BTreeMap<u16, u32> = BTreeMap::new();
    for claim in &claims {
        let inherited = claim.modal_label != 0 && taken.insert(claim.modal_label);
        let label = if inherited {
            claim.modal_label
        } else if dynamic_instances.contains(&claim.instance) {
            let l = next_label;
            next_label += 1;
            l
        } else {
            0
        };
        if label != 0 {
            active.insert(claim.instance, label);
        }
        assignments.insert(
            claim.instance,
            LabelAssignment {
                label,
                modal_prev_instance: claim.modal_prev_instance,
                modal_votes: claim.modal_votes,
                total_votes: claim.total_votes,
                no_correspondences: claim.total_votes == 0,
            },
        );
    }

    LabelPropagation { labels: TrackLabelSet { next_label, active }, assignments }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TrackStatus {
    Dynamic,
    Static,
    Lost,
}

#[derive(Debug, Clone)]
pub struct TrackRecord {
    pub frame: usize,
    /// Object motion H in the k-1 camera frame; None when the object was
    /// tracked but not estimated (static, gated out, or too few points).
    pub motion: Option<SE3Pose>,
    /// Centroid of the sampled object points in the k-1 camera frame.
    pub centroid: Option<Point3>,
    pub point_count: usize,
    pub area_fraction: f64,
    pub mean_depth: f64,
    pub velocity_kmh: Option<f64>,
}

/// Persistent identity with its per-frame motion history.
#[derive(Debug, Clone)]
pub struct ObjectTrack {
    pub label: u32,
    pub records: Vec<TrackRecord>,
    pub status: TrackStatus,
}

impl ObjectTrack {
    pub fn new(label: u32) -> Self {
        Self { label, records: Vec::new(), status: TrackStatus::Static }
    }

    /// Appends one per-frame observation, computing velocity from the motion
    /// and centroid, and recomputes the track status.
    pub fn update(
        &mut self,
        frame: usize,
        motion: Option<SE3Pose>,
        centroid: Option<Point3>,
        point_count: usize,
        area_fraction: f64,
        mean_depth: f64,
        period: f64,
        class: MotionClass,
    ) -> Result<(), DynamicsError> {
        let velocity_kmh = match (&motion, &centroid) {
            (Some(h), Some(c)) => {
                Some(object_velocity(h, c, period).map_err(|_| DynamicsError::InvalidPeriod(period))?)
            }
            _ => None,
        };
        self.records.push(TrackRecord {
            frame,
            motion,
            centroid,
            point_count,
            area_fraction,
            mean_depth,
            velocity_kmh,
        });
        self.status = match class {
            MotionClass::Dynamic => TrackStatus::Dynamic,
            MotionClass::Static => TrackStatus::Static,
        };
        Ok(())
    }

    pub fn mark_lost(&mut self) {
        self.status = TrackStatus::Lost;
    }

    pub fn last_motion(&self) -> Option<SE3Pose> {
        self.records.iter().rev().find_map(|r| r.motion)
    }
}
