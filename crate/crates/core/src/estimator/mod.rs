//! Robust nonlinear least-squares estimation of camera and object motion.
//!
//! Both problems minimize Huber-robustified re-projection residuals over a
//! 6-dof twist with Levenberg-Marquardt. Internally the solver always
//! optimizes a pose `G` that is applied directly to the k-1 points before
//! projection: for the camera problem `G = T^-1`, for an object `G = X`.
//! The joint variant additionally optimizes one 2-dof refined flow per
//! correspondence against a prior anchored at the measured flow; the normal
//! equations then have arrowhead structure and the flow blocks are
//! eliminated with a Schur complement, keeping each iteration linear in the
//! point count.

mod p3p;

use crate::geometry::{
    se3_exp, ImagePoint, Intrinsics, FlowVector, Point3, SE3Pose, Twist,
};
use nalgebra::{Matrix2, Matrix2x3, Matrix2x6, Matrix3x6, Matrix6, Matrix6x2, Vector2, Vector6};
use rand::Rng;
use thiserror::Error;

pub use p3p::solve_p3p;

/// One 3D point at frame k-1 paired with its measured flow into frame k.
#[derive(Debug, Clone, Copy)]
pub struct Correspondence {
    pub p_prev: ImagePoint,
    pub m_prev: Point3,
    pub flow: FlowVector,
    pub valid: bool,
}

impl Correspondence {
    pub fn new(p_prev: ImagePoint, m_prev: Point3, flow: FlowVector) -> Self {
        Self { p_prev, m_prev, flow, valid: true }
    }

    /// Measured pixel position in frame k (Eq. of optical flow).
    pub fn p_curr(&self) -> ImagePoint {
        self.p_prev + self.flow
    }
}

/// Which motion the residual predicts with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimationMode {
    /// Predict static points with the inverse camera motion.
    Camera,
    /// Predict object points with the camera-relative object motion X.
    Object,
}

/// Huber kernel on the squared Mahalanobis norm `s` of a residual:
/// quadratic for sqrt(s) <= delta, linear above.
#[derive(Debug, Clone, Copy)]
pub struct HuberKernel {
    pub delta: f64,
}

impl HuberKernel {
    pub fn new(delta: f64) -> Self {
        Self { delta }
    }

    pub fn cost(&self, s: f64) -> f64 {
        let d2 = self.delta * self.delta;
        if s <= d2 {
            s
        } else {
            2.0 * self.delta * s.sqrt() - d2
        }
    }

    /// d cost / d s, the IRLS weight.
    pub fn weight(&self, s: f64) -> f64 {
        let d2 = self.delta * self.delta;
        if s <= d2 {
            1.0
        } else {
            self.delta / s.sqrt()
        }
    }
}

/// Tuning for the motion estimators and their initialization.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct SolverConfig {
    /// Covariance of the re-projection residual, px^2.
    pub sigma1: Matrix2<f64>,
    /// Covariance of the flow-prior residual (joint mode), px^2.
    pub sigma2: Matrix2<f64>,
    pub huber_delta: f64,
    pub max_iterations: usize,
    /// Stop when the relative cost decrease of an accepted step falls below this.
    pub cost_tolerance: f64,
    /// Stop when the accepted twist step norm falls below this.
    pub step_tolerance: f64,
    pub lambda_init: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub ransac_max_iterations: usize,
    pub ransac_confidence: f64,
    /// Re-projection inlier threshold, px.
    pub inlier_threshold: f64,
    /// Minimum number of valid correspondences a solve accepts.
    pub min_points: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            sigma1: Matrix2::identity(),
            // 0.5 px flow-prior sigma: tight enough that refined flow stays
            // anchored to the measurement, loose enough to denoise it.
            sigma2: Matrix2::identity() * 0.25,
            huber_delta: 1.345,
            max_iterations: 50,
            cost_tolerance: 1e-10,
            step_tolerance: 1e-12,
            lambda_init: 1e-4,
            lambda_up: 10.0,
            lambda_down: 1.0 / 3.0,
            ransac_max_iterations: 200,
            ransac_confidence: 0.99,
            inlier_threshold: 2.0,
            min_points: 3,
        }
    }
}

impl SolverConfig {
    /// Isotropic covariances from per-axis standard deviations in pixels.
    pub fn with_sigmas(sigma1_px: f64, sigma2_px: f64) -> Self {
        Self {
            sigma1: Matrix2::identity() * sigma1_px * sigma1_px,
            sigma2: Matrix2::identity() * sigma2_px * sigma2_px,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct EstimateResult {
    pub motion: SE3Pose,
    /// One refined flow per correspondence; present only in joint mode.
    pub refined_flow: Option<Vec<FlowVector>>,
    /// Inlier mask at the final state, measured-flow re-projection error
    /// against `inlier_threshold`. Same length as the input correspondences.
    pub inliers: Vec<bool>,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl EstimateResult {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

#[derive(Debug, Error)]
pub enum EstimateError {
    #[error("under-determined problem: {have} usable correspondences, need {need}")]
    Underdetermined { have: usize, need: usize },
    #[error("too few points: {have} < configured minimum {need}")]
    TooFewPoints { have: usize, need: usize },
    #[error("optimization diverged (cost {cost})")]
    Diverged { last_motion: SE3Pose, cost: f64 },
    #[error("initialization failed: no hypothesis with enough inliers")]
    InitFailed,
    #[error("no motion candidates to select from")]
    EmptyCandidates,
    #[error("covariance matrix is not symmetric positive definite")]
    InvalidCovariance,
}

// Penalty charged per correspondence whose prediction falls behind the
// camera; keeps the cost finite while making such states always lose.
const BEHIND_CAMERA_PENALTY: f64 = 1e9;
const MIN_Z: f64 = 1e-9;
const MAX_LAMBDA: f64 = 1e14;
const MIN_LAMBDA: f64 = 1e-15;

fn internal_pose(mode: EstimationMode, motion: &SE3Pose) -> SE3Pose {
    match mode {
        EstimationMode::Camera => motion.inverse(),
        EstimationMode::Object => *motion,
    }
}

// The mapping is an involution, so converting back is the same operation.
fn external_pose(mode: EstimationMode, g: &SE3Pose) -> SE3Pose {
    internal_pose(mode, g)
}

fn information(sigma: &Matrix2<f64>) -> Result<Matrix2<f64>, EstimateError> {
    let sym = (sigma - sigma.transpose()).norm();
    if sym > 1e-12 * (1.0 + sigma.norm()) {
        return Err(EstimateError::InvalidCovariance);
    }
    sigma
        .cholesky()
        .map(|c| c.inverse())
        .ok_or(EstimateError::InvalidCovariance)
}

/// Re-projection residual and its Jacobian w.r.t. a left perturbation of G
/// (the pose applied directly to the point; T^-1 for the camera problem).
///
/// `measured` is the pixel the prediction is compared against
/// (p_prev + flow, with the measured or the refined flow).
/// Returns None when the transformed point is behind the camera.
pub fn reprojection_term(
    m_prev: &Point3,
    measured: &ImagePoint,
    g: &SE3Pose,
    k: &Intrinsics,
) -> Option<(Vector2<f64>, Matrix2x6<f64>)> {
    let y = g.apply(m_prev);
    if y.z <= MIN_Z {
        return None;
    }
    let inv_z = 1.0 / y.z;
    let pred_u = k.f * y.x * inv_z + k.cu;
    let pred_v = k.f * y.y * inv_z + k.cv;
    let r = Vector2::new(measured.u - pred_u, measured.v - pred_v);

    // d pi / d y
    let dpi = Matrix2x3::new(
        k.f * inv_z, 0.0, -k.f * y.x * inv_z * inv_z,
        0.0, k.f * inv_z, -k.f * y.y * inv_z * inv_z,
    );
    // d (exp(d)G m) / d d at d = 0: [I | -skew(y)]
    let mut dy = Matrix3x6::zeros();
    dy.fixed_view_mut::<3, 3>(0, 0).copy_from(&nalgebra::Matrix3::identity());
    dy.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-crate::geometry::skew(&y.coords)));
    let jac = -dpi * dy;
    Some((r, jac))
}

fn motion_only_cost(
    corrs: &[Correspondence],
    g: &SE3Pose,
    k: &Intrinsics,
    omega1: &Matrix2<f64>,
    kernel: &HuberKernel,
) -> f64 {
    let mut cost = 0.0;
    for c in corrs.iter().filter(|c| c.valid) {
        match reprojection_term(&c.m_prev, &c.p_curr(), g, k) {
            Some((r, _)) => cost += kernel.cost((r.transpose() * omega1 * r)[0]),
            None => cost += BEHIND_CAMERA_PENALTY,
        }
    }
    cost
}

fn joint_cost(
    corrs: &[Correspondence],
    g: &SE3Pose,
    phis: &[Vector2<f64>],
    k: &Intrinsics,
    omega1: &Matrix2<f64>,
    omega2: &Matrix2<f64>,
    kernel: &HuberKernel,
) -> f64 {
    let mut cost = 0.0;
    for (c, phi) in corrs.iter().zip(phis) {
        if !c.valid {
            continue;
        }
        let measured = c.p_prev + FlowVector::new(phi.x, phi.y);
        match reprojection_term(&c.m_prev, &measured, g, k) {
            Some((r, _)) => cost += kernel.cost((r.transpose() * omega1 * r)[0]),
            None => cost += BEHIND_CAMERA_PENALTY,
        }
        let q = Vector2::new(phi.x - c.flow.du, phi.y - c.flow.dv);
        cost += kernel.cost((q.transpose() * omega2 * q)[0]);
    }
    cost
}

fn validate_input(corrs: &[Correspondence], cfg: &SolverConfig) -> Result<usize, EstimateError> {
    let have = corrs.iter().filter(|c| c.valid).count();
    if have < 3 {
        return Err(EstimateError::Underdetermined { have, need: 3 });
    }
    if have < cfg.min_points {
        return Err(EstimateError::TooFewPoints { have, need: cfg.min_points });
    }
    Ok(have)
}

/// Inlier mask of the measured-flow re-projection error under `motion`.
pub fn inlier_mask(
    corrs: &[Correspondence],
    motion: &SE3Pose,
    mode: EstimationMode,
    threshold: f64,
    k: &Intrinsics,
) -> Vec<bool> {
    let g = internal_pose(mode, motion);
    corrs
        .iter()
        .map(|c| {
            if !c.valid {
                return false;
            }
            match reprojection_term(&c.m_prev, &c.p_curr(), &g, k) {
                Some((r, _)) => r.norm() <= threshold,
                None => false,
            }
        })
        .collect()
}

/// Minimizes the Huber re-projection cost over the camera twist (motion only).
pub fn estimate_camera_motion(
    corrs: &[Correspondence],
    init: &SE3Pose,
    cfg: &SolverConfig,
    k: &Intrinsics,
) -> Result<EstimateResult, EstimateError> {
    estimate_motion_only(corrs, init, cfg, k, EstimationMode::Camera)
}

/// Minimizes the Huber re-projection cost over an object twist (motion only).
pub fn estimate_object_motion(
    corrs: &[Correspondence],
    init: &SE3Pose,
    cfg: &SolverConfig,
    k: &Intrinsics,
) -> Result<EstimateResult, EstimateError> {
    estimate_motion_only(corrs, init, cfg, k, EstimationMode::Object)
}

fn estimate_motion_only(
    corrs: &[Correspondence],
    init: &SE3Pose,
    cfg: &SolverConfig,
    k: &Intrinsics,
    mode: EstimationMode,
) -> Result<EstimateResult, EstimateError> {
    validate_input(corrs, cfg)?;
    let omega1 = information(&cfg.sigma1)?;
    let kernel = HuberKernel::new(cfg.huber_delta);

    let mut g = internal_pose(mode, init);
    let mut cost = motion_only_cost(corrs, &g, k, &omega1, &kernel);
    let mut lambda = cfg.lambda_init;
    let mut iterations = 0;
    let mut converged = false;

    'outer: for _ in 0..cfg.max_iterations {
        iterations += 1;
        let mut h = Matrix6::<f64>::zeros();
        let mut b = Vector6::<f64>::zeros();
        for c in corrs.iter().filter(|c| c.valid) {
            if let Some((r, jac)) = reprojection_term(&c.m_prev, &c.p_curr(), &g, k) {
                let w = kernel.weight((r.transpose() * omega1 * r)[0]);
                let jt_omega = jac.transpose() * omega1;
                h += (jt_omega * jac) * w;
                b += (jt_omega * r) * w;
            }
        }

        let mut accepted = false;
        while lambda <= MAX_LAMBDA {
            let mut damped = h;
            for i in 0..6 {
                damped[(i, i)] += lambda * h[(i, i)].max(1e-12);
            }
            let step = match damped.cholesky() {
                Some(chol) => chol.solve(&(-b)),
                None => {
                    lambda *= cfg.lambda_up;
                    continue;
                }
            };
            let g_new = se3_exp(&twist_from_vec(&step)) * g;
            let cost_new = motion_only_cost(corrs, &g_new, k, &omega1, &kernel);
            if cost_new.is_finite() && cost_new <= cost {
                let decrease = cost - cost_new;
                g = g_new;
                cost = cost_new;
                lambda = (lambda * cfg.lambda_down).max(MIN_LAMBDA);
                accepted = true;
                if step.norm() < cfg.step_tolerance
                    || decrease <= cfg.cost_tolerance * cost.max(1e-300)
                {
                    converged = true;
                }
                break;
            }
            lambda *= cfg.lambda_up;
        }
        if !accepted {
            // No descent direction left at maximum damping: terminal state.
            converged = true;
            break 'outer;
        }
        if converged {
            break;
        }
    }

    if !cost.is_finite() {
        return Err(EstimateError::Diverged { last_motion: external_pose(mode, &g), cost });
    }
    let motion = external_pose(mode, &g);
    let inliers = inlier_mask(corrs, &motion, mode, cfg.inlier_threshold, k);
    Ok(EstimateResult {
        motion,
        refined_flow: None,
        inliers,
        final_cost: cost,
        iterations,
        converged,
    })
}

/// Jointly minimizes the re-projection cost and a flow prior over the twist
/// and one refined flow per correspondence. The flow blocks of the normal
/// equations are diagonal 2x2 and are eliminated by a Schur complement, so
/// each iteration costs O(n).
pub fn estimate_joint(
    corrs: &[Correspondence],
    init: &SE3Pose,
    cfg: &SolverConfig,
    k: &Intrinsics,
    mode: EstimationMode,
) -> Result<EstimateResult, EstimateError> {
    validate_input(corrs, cfg)?;
    let omega1 = information(&cfg.sigma1)?;
    let omega2 = information(&cfg.sigma2)?;
    let kernel = HuberKernel::new(cfg.huber_delta);

    let mut g = internal_pose(mode, init);
    let mut phis: Vec<Vector2<f64>> =
        corrs.iter().map(|c| Vector2::new(c.flow.du, c.flow.dv)).collect();
    let mut cost = joint_cost(corrs, &g, &phis, k, &omega1, &omega2, &kernel);
    let mut lambda = cfg.lambda_init;
    let mut iterations = 0;
    let mut converged = false;

    // Per-point blocks, rebuilt each outer iteration.
    let n = corrs.len();
    let mut w_blocks: Vec<Matrix6x2<f64>> = vec![Matrix6x2::zeros(); n];
    let mut v_blocks: Vec<Matrix2<f64>> = vec![Matrix2::zeros(); n];
    let mut b_phi: Vec<Vector2<f64>> = vec![Vector2::zeros(); n];
    let mut active: Vec<bool> = vec![false; n];

    'outer: for _ in 0..cfg.max_iterations {
        iterations += 1;
        let mut u = Matrix6::<f64>::zeros();
        let mut b_xi = Vector6::<f64>::zeros();
        for (i, c) in corrs.iter().enumerate() {
            active[i] = false;
            if !c.valid {
                continue;
            }
            let measured = c.p_prev + FlowVector::new(phis[i].x, phis[i].y);
            let Some((r, jac)) = reprojection_term(&c.m_prev, &measured, &g, k) else {
                continue;
            };
            let w1 = kernel.weight((r.transpose() * omega1 * r)[0]);
            let q = phis[i] - Vector2::new(c.flow.du, c.flow.dv);
            let w2 = kernel.weight((q.transpose() * omega2 * q)[0]);

            let jt_omega = jac.transpose() * (omega1 * w1);
            u += jt_omega * jac;
            b_xi += jt_omega * r;
            // d r / d phi = I, d q / d phi = I
            w_blocks[i] = jt_omega;
            v_blocks[i] = omega1 * w1 + omega2 * w2;
            b_phi[i] = omega1 * (r * w1) + omega2 * (q * w2);
            active[i] = true;
        }

        let mut accepted = false;
        while lambda <= MAX_LAMBDA {
            // Schur complement over the damped flow blocks.
            let mut s = u;
            for i in 0..6 {
                s[(i, i)] += lambda * u[(i, i)].max(1e-12);
            }
            let mut rhs = -b_xi;
            let mut v_inv: Vec<Matrix2<f64>> = Vec::with_capacity(n);
            let mut singular = false;
            for i in 0..n {
                if !active[i] {
                    v_inv.push(Matrix2::zeros());
                    continue;
                }
                let mut v = v_blocks[i];
                v[(0, 0)] += lambda * v_blocks[i][(0, 0)].max(1e-12);
                v[(1, 1)] += lambda * v_blocks[i][(1, 1)].max(1e-12);
                match v.try_inverse() {
                    Some(inv) => {
                        s -= w_blocks[i] * inv * w_blocks[i].transpose();
                        rhs += w_blocks[i] * (inv * b_phi[i]);
                        v_inv.push(inv);
                    }
                    None => {
                        singular = true;
                        break;
                    }
                }
            }
            if singular {
                lambda *= cfg.lambda_up;
                continue;
            }
            let step_xi = match s.cholesky() {
                Some(chol) => chol.solve(&rhs),
                None => {
                    lambda *= cfg.lambda_up;
                    continue;
                }
            };
            let g_new = se3_exp(&twist_from_vec(&step_xi)) * g;
            let mut phis_new = phis.clone();
            let mut step_norm2 = step_xi.norm_squared();
            for i in 0..n {
                if active[i] {
                    let dphi = v_inv[i] * (-b_phi[i] - w_blocks[i].transpose() * step_xi);
                    phis_new[i] += dphi;
                    step_norm2 += dphi.norm_squared();
                }
            }
            let cost_new = joint_cost(corrs, &g_new, &phis_new, k, &omega1, &omega2, &kernel);
            if cost_new.is_finite() && cost_new <= cost {
                let decrease = cost - cost_new;
                g = g_new;
                phis = phis_new;
                cost = cost_new;
                lambda = (lambda * cfg.lambda_down).max(MIN_LAMBDA);
                accepted = true;
                if step_norm2.sqrt() < cfg.step_tolerance
                    || decrease <= cfg.cost_tolerance * cost.max(1e-300)
                {
                    converged = true;
                }
                break;
            }
            lambda *= cfg.lambda_up;
        }
        if !accepted {
            converged = true;
            break 'outer;
        }
        if converged {
            break;
        }
    }

    if !cost.is_finite() {
        return Err(EstimateError::Diverged { last_motion: external_pose(mode, &g), cost });
    }
    let motion = external_pose(mode, &g);
    let inliers = inlier_mask(corrs, &motion, mode, cfg.inlier_threshold, k);
    Ok(EstimateResult {
        motion,
        refined_flow: Some(
            phis.iter().map(|p| FlowVector::new(p.x, p.y)).collect(),
        ),
        inliers,
        final_cost: cost,
        iterations,
        converged,
    })
}

fn twist_from_vec(v: &Vector6<f64>) -> Twist {
    Twist::from_array([v[0], v[1], v[2], v[3], v[4], v[5]])
}

/// Constant-motion initialization: the previous motion, or identity at the
/// start of a sequence.
pub fn init_by_propagation(prev_motion: Option<&SE3Pose>) -> SE3Pose {
    prev_motion.copied().unwrap_or_else(SE3Pose::identity)
}

/// P3P + RANSAC camera-motion hypothesis from 3D(k-1) / 2D(k)
/// correspondences. Deterministic given the random source. Returns the best
/// hypothesis by inlier count and its inlier mask.
pub fn init_by_p3p_ransac<R: Rng + ?Sized>(
    corrs: &[Correspondence],
    cfg: &SolverConfig,
    k: &Intrinsics,
    rng: &mut R,
) -> Result<(SE3Pose, Vec<bool>), EstimateError> {
    let idx: Vec<usize> = (0..corrs.len()).filter(|&i| corrs[i].valid).collect();
    if idx.len() < 4 {
        return Err(EstimateError::Underdetermined { have: idx.len(), need: 4 });
    }

    // Unit bearing of the measured current pixel of each correspondence.
    let bearings: Vec<nalgebra::Vector3<f64>> = corrs
        .iter()
        .map(|c| {
            let p = c.p_curr();
            nalgebra::Vector3::new((p.u - k.cu) / k.f, (p.v - k.cv) / k.f, 1.0).normalize()
        })
        .collect();

    let mut best_count = 0usize;
    let mut best_w: Option<SE3Pose> = None;
    let mut max_iters = cfg.ransac_max_iterations;
    let mut iter = 0;
    while iter < max_iters {
        iter += 1;
        let a = idx[rng.gen_range(0..idx.len())];
        let b = idx[rng.gen_range(0..idx.len())];
        let c3 = idx[rng.gen_range(0..idx.len())];
        if a == b || b == c3 || a == c3 {
            continue;
        }
        let pts = [corrs[a].m_prev, corrs[b].m_prev, corrs[c3].m_prev];
        let area = (pts[1] - pts[0]).cross(&(pts[2] - pts[0])).norm();
        let scale = (pts[1] - pts[0]).norm().max((pts[2] - pts[0]).norm());
        if area < 1e-9 * scale.max(1.0) {
            continue; // collinear sample
        }
        let brs = [bearings[a], bearings[b], bearings[c3]];
        for w in solve_p3p(&pts, &brs) {
            let mut count = 0usize;
            for &i in &idx {
                if let Some((r, _)) = reprojection_term(&corrs[i].m_prev, &corrs[i].p_curr(), &w, k)
                {
                    if r.norm() <= cfg.inlier_threshold {
                        count += 1;
                    }
                }
            }
            if count > best_count {
                best_count = count;
                best_w = Some(w);
                // Adaptive early exit at the configured confidence.
                let inlier_ratio = count as f64 / idx.len() as f64;
                let p_good = inlier_ratio.powi(3);
                if p_good > 1.0 - 1e-12 {
                    max_iters = iter;
                } else if p_good > 0.0 {
                    let needed =
                        ((1.0 - cfg.ransac_confidence).ln() / (1.0 - p_good).ln()).ceil();
                    max_iters = max_iters.min((needed.max(1.0)) as usize).max(iter);
                }
            }
        }
    }

    match best_w {
        Some(w) if best_count >= 4 => {
            let motion = w.inverse();
            let mask = inlier_mask(corrs, &motion, EstimationMode::Camera, cfg.inlier_threshold, k);
            Ok((motion, mask))
        }
        _ => Err(EstimateError::InitFailed),
    }
}

/// Picks the candidate with the most inliers. Ties go to the earliest
/// candidate, so callers list the propagation model first to favor temporal
/// smoothness.
pub fn select_model(candidates: &[(SE3Pose, usize)]) -> Result<SE3Pose, EstimateError> {
    candidates
        .iter()
        .rev()
        .max_by_key(|(_, count)| *count)
        .map(|(pose, _)| *pose)
        .ok_or(EstimateError::EmptyCandidates)
}

#[cfg(test)]
mod tests;
