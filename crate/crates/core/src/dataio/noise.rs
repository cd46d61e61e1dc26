//! Sensor noise models for the synthetic experiments.
//!
//! Depth is corrupted with zero-mean Gaussian noise whose sigma follows the
//! stereo accuracy model sigma = z^2 / (f b) * dd, with dd the disparity
//! accuracy in pixels and b the baseline in meters. Flow is corrupted with
//! per-axis Gaussian noise, optionally restricted to object or background
//! pixels, plus an optional fraction of gross uniform outliers.

use super::{DepthMap, FlowField, InstanceMask};
use crate::geometry::{FlowVector, Intrinsics};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Disparity accuracy dd, pixels (typically 0.1 to 0.2).
    pub disparity_accuracy: f64,
    /// Stereo baseline b, meters.
    pub baseline: f64,
    /// Per-axis flow noise sigma, pixels.
    pub flow_sigma: [f64; 2],
    /// Fraction of flow vectors hit by gross uniform corruption.
    pub flow_outlier_fraction: f64,
    /// Half-range of the per-axis uniform corruption, pixels.
    pub flow_outlier_range: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            disparity_accuracy: 0.0,
            baseline: 0.5,
            flow_sigma: [0.0, 0.0],
            flow_outlier_fraction: 0.0,
            flow_outlier_range: 20.0,
        }
    }
}

impl NoiseSpec {
    pub fn depth_sigma(&self, z: f64, focal: f64) -> f64 {
        z * z / (focal * self.baseline) * self.disparity_accuracy
    }
}

/// Per-axis Gaussian sigma that yields the given mean end-point error:
/// E||n|| = sigma * sqrt(pi / 2) for isotropic 2D Gaussian noise.
pub fn sigma_for_target_epe(target_epe: f64) -> f64 {
    target_epe / (std::f64::consts::PI / 2.0).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseScope {
    All,
    /// Only pixels with instance id 0.
    BackgroundOnly,
    /// Only pixels with instance id >= 1.
    ObjectsOnly,
}

fn in_scope(scope: NoiseScope, mask: &InstanceMask, u: u32, v: u32) -> bool {
    match scope {
        NoiseScope::All => true,
        NoiseScope::BackgroundOnly => mask.get(u, v) == 0,
        NoiseScope::ObjectsOnly => mask.get(u, v) >= 1,
    }
}

/// Replaces every valid depth z with z + N(0, sigma(z)^2). Samples pushed
/// to or below zero become invalid. Deterministic for a given rng state.
pub fn apply_depth_noise<R: Rng + ?Sized>(
    depth: &mut DepthMap,
    k: &Intrinsics,
    spec: &NoiseSpec,
    rng: &mut R,
) {
    if spec.disparity_accuracy == 0.0 {
        return;
    }
    let unit = Normal::new(0.0, 1.0).unwrap();
    for v in 0..depth.height {
        for u in 0..depth.width {
            if !depth.is_valid_at(u, v) {
                continue;
            }
            let z = depth.get(u, v) as f64;
            let noisy = z + unit.sample(rng) * spec.depth_sigma(z, k.f);
            depth.set(u, v, if noisy > 0.0 { noisy as f32 } else { 0.0 });
        }
    }
}

/// Adds per-axis Gaussian noise to every valid flow vector in scope.
pub fn apply_flow_noise<R: Rng + ?Sized>(
    flow: &mut FlowField,
    sigma: [f64; 2],
    scope: NoiseScope,
    mask: &InstanceMask,
    rng: &mut R,
) {
    if sigma[0] == 0.0 && sigma[1] == 0.0 {
        return;
    }
    let unit = Normal::new(0.0, 1.0).unwrap();
    for v in 0..flow.height {
        for u in 0..flow.width {
            if !flow.is_valid_at(u, v) || !in_scope(scope, mask, u, v) {
                continue;
            }
            let f = flow.get(u, v);
            flow.set(
                u,
                v,
                FlowVector::new(
                    f.du + unit.sample(rng) * sigma[0],
                    f.dv + unit.sample(rng) * sigma[1],
                ),
            );
        }
    }
}

/// Corrupts a random fraction of the valid flow vectors in scope with
/// per-axis uniform offsets in [-range, range].
pub fn apply_flow_outliers<R: Rng + ?Sized>(
    flow: &mut FlowField,
    fraction: f64,
    range: f64,
    scope: NoiseScope,
    mask: &InstanceMask,
    rng: &mut R,
) {
    if fraction <= 0.0 || range <= 0.0 {
        return;
    }
    for v in 0..flow.height {
        for u in 0..flow.width {
            if !flow.is_valid_at(u, v) || !in_scope(scope, mask, u, v) {
                continue;
            }
            if rng.gen_bool(fraction.min(1.0)) {
                let f = flow.get(u, v);
                flow.set(
                    u,
                    v,
                    FlowVector::new(
                        f.du + rng.gen_range(-range..range),
                        f.dv + rng.gen_range(-range..range),
                    ),
                );
            }
        }
    }
}
