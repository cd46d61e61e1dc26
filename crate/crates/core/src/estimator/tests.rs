use super::*;
use crate::geometry::{
    predict_object_point, predict_static_point, project, se3_exp, Twist,
};
use nalgebra::Vector6;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn k640() -> Intrinsics {
    Intrinsics { f: 600.0, cu: 320.0, cv: 240.0, width: 640, height: 480 }
}

fn scatter_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point3> {
    (0..n)
        .map(|_| {
            Point3::new(
                rng.gen_range(-6.0..6.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(4.0..30.0),
            )
        })
        .collect()
}

/// Exact correspondences induced by a ground-truth camera motion.
fn camera_corrs(points: &[Point3], t_gt: &SE3Pose, k: &Intrinsics) -> Vec<Correspondence> {
    points
        .iter()
        .filter_map(|m| {
            let p_prev = project(m, k).ok()?;
            let p_curr = predict_static_point(m, t_gt, k).ok()?;
            Some(Correspondence::new(p_prev, *m, p_curr - p_prev))
        })
        .collect()
}

/// Exact correspondences induced by a ground-truth object motion X.
fn object_corrs(points: &[Point3], x_gt: &SE3Pose, k: &Intrinsics) -> Vec<Correspondence> {
    points
        .iter()
        .filter_map(|m| {
            let p_prev = project(m, k).ok()?;
            let p_curr = predict_object_point(m, x_gt, k).ok()?;
            Some(Correspondence::new(p_prev, *m, p_curr - p_prev))
        })
        .collect()
}

fn pose_diff(a: &SE3Pose, b: &SE3Pose) -> (f64, f64) {
    let e = a.inverse() * *b;
    (e.translation().norm(), e.rotation_angle().to_degrees())
}

#[test]
fn zero_motion_noise_free_recovers_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let k = k640();
    let points = scatter_points(&mut rng, 50);
    let corrs = camera_corrs(&points, &SE3Pose::identity(), &k);
    let res =
        estimate_camera_motion(&corrs, &SE3Pose::identity(), &SolverConfig::default(), &k).unwrap();
    let (et, er) = pose_diff(&res.motion, &SE3Pose::identity());
    assert!(et < 1e-9 && er < 1e-9);
    assert!(res.final_cost < 1e-12);
}

#[test]
fn forward_motion_noise_free_exact_recovery() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let k = k640();
    let t_gt = se3_exp(&Twist::from_array([0.0, 0.0, 0.8, 0.0, 0.0, 0.0]));
    let points = scatter_points(&mut rng, 200);
    let corrs = camera_corrs(&points, &t_gt, &k);
    let res =
        estimate_camera_motion(&corrs, &SE3Pose::identity(), &SolverConfig::default(), &k).unwrap();
    let (et, er) = pose_diff(&res.motion, &t_gt);
    assert!(et < 1e-6, "E_t = {et}");
    assert!(er < 1e-6, "E_R = {er} deg");
    assert_eq!(res.inlier_count(), corrs.len());
}

#[test]
fn six_point_minimal_recovery() {
    // Exact recovery from as few as six well-distributed points.
    let k = k640();
    let t_gt = se3_exp(&Twist::from_array([0.2, -0.1, 0.5, 0.02, -0.03, 0.01]));
    let points = vec![
        Point3::new(-4.0, -2.0, 6.0),
        Point3::new(4.0, -2.0, 8.0),
        Point3::new(-4.0, 2.0, 12.0),
        Point3::new(4.0, 2.0, 18.0),
        Point3::new(0.0, 0.0, 9.0),
        Point3::new(1.5, -1.0, 25.0),
    ];
    let corrs = camera_corrs(&points, &t_gt, &k);
    assert_eq!(corrs.len(), 6);
    let res =
        estimate_camera_motion(&corrs, &SE3Pose::identity(), &SolverConfig::default(), &k).unwrap();
    let (et, er) = pose_diff(&res.motion, &t_gt);
    assert!(et < 1e-6 && er < 1e-6, "E_t = {et}, E_R = {er}");
}

#[test]
fn object_static_in_camera_frame_recovers_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let k = k640();
    let points = scatter_points(&mut rng, 80);
    let corrs = object_corrs(&points, &SE3Pose::identity(), &k);
    let res =
        estimate_object_motion(&corrs, &SE3Pose::identity(), &SolverConfig::default(), &k).unwrap();
    let (et, er) = pose_diff(&res.motion, &SE3Pose::identity());
    assert!(et < 1e-9 && er < 1e-9);
}

#[test]
fn turning_object_noise_free_exact_recovery() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let k = k640();
    // 3 degrees per frame about the vertical axis, through a point ahead.
    let pivot = nalgebra::Vector3::new(1.0, 0.0, 12.0);
    let rot = se3_exp(&Twist::new(
        nalgebra::Vector3::zeros(),
        nalgebra::Vector3::new(0.0, 3f64.to_radians(), 0.0),
    ));
    let shift = |v: nalgebra::Vector3<f64>| {
        SE3Pose::from_quaternion(nalgebra::UnitQuaternion::identity(), v)
    };
    let x_gt = shift(pivot) * rot * shift(-pivot);
    let points: Vec<Point3> = (0..120)
        .map(|_| {
            Point3::new(
                pivot.x + rng.gen_range(-1.0..1.0),
                rng.gen_range(-0.8..0.8),
                pivot.z + rng.gen_range(-1.5..1.5),
            )
        })
        .collect();
    let corrs = object_corrs(&points, &x_gt, &k);
    let res =
        estimate_object_motion(&corrs, &SE3Pose::identity(), &SolverConfig::default(), &k).unwrap();
    let (et, er) = pose_diff(&res.motion, &x_gt);
    assert!(er < 1e-6, "E_R = {er} deg");
    assert!(et < 1e-6, "E_t = {et}");
}

#[test]
fn too_few_points_is_reported() {
    let k = k640();
    let corrs = vec![Correspondence::new(
        ImagePoint::new(10.0, 10.0),
        Point3::new(0.0, 0.0, 5.0),
        FlowVector::default(),
    )];
    match estimate_camera_motion(&corrs, &SE3Pose::identity(), &SolverConfig::default(), &k) {
        Err(EstimateError::Underdetermined { have: 1, need: 3 }) => {}
        other => panic!("expected Underdetermined, got {other:?}"),
    }
    let cfg = SolverConfig { min_points: 30, ..SolverConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let points = scatter_points(&mut rng, 10);
    let corrs = camera_corrs(&points, &SE3Pose::identity(), &k);
    match estimate_camera_motion(&corrs, &SE3Pose::identity(), &cfg, &k) {
        Err(EstimateError::TooFewPoints { .. }) => {}
        other => panic!("expected TooFewPoints, got {other:?}"),
    }
}

#[test]
fn final_cost_never_exceeds_initial() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let k = k640();
    let t_gt = se3_exp(&Twist::from_array([0.3, 0.1, 0.6, 0.01, 0.04, -0.02]));
    let points = scatter_points(&mut rng, 100);
    let mut corrs = camera_corrs(&points, &t_gt, &k);
    // perturb flows so the optimum is not exactly reachable
    for c in &mut corrs {
        c.flow.du += rng.gen_range(-0.5..0.5);
        c.flow.dv += rng.gen_range(-0.5..0.5);
    }
    let cfg = SolverConfig::default();
    let init = SE3Pose::identity();
    let omega1 = information(&cfg.sigma1).unwrap();
    let kernel = HuberKernel::new(cfg.huber_delta);
    let init_cost = motion_only_cost(
        &corrs,
        &internal_pose(EstimationMode::Camera, &init),
        &k,
        &omega1,
        &kernel,
    );
    let res = estimate_camera_motion(&corrs, &init, &cfg, &k).unwrap();
    assert!(res.final_cost <= init_cost);
}

#[test]
fn gauge_check_predictions_reproduce_measurements() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let k = k640();
    let t_gt = se3_exp(&Twist::from_array([0.1, -0.05, 0.7, 0.0, 0.02, 0.0]));
    let points = scatter_points(&mut rng, 150);
    let corrs = camera_corrs(&points, &t_gt, &k);
    let res =
        estimate_camera_motion(&corrs, &SE3Pose::identity(), &SolverConfig::default(), &k).unwrap();
    for c in &corrs {
        let pred = predict_static_point(&c.m_prev, &res.motion, &k).unwrap();
        let meas = c.p_curr();
        assert!((pred.u - meas.u).abs() < 1e-6 && (pred.v - meas.v).abs() < 1e-6);
    }
}

// ---- Jacobian checks against central finite differences ----

fn fd_reprojection_jacobian(
    m: &Point3,
    measured: &ImagePoint,
    g: &SE3Pose,
    k: &Intrinsics,
) -> Matrix2x6<f64> {
    let h = 1e-6;
    let mut jac = Matrix2x6::zeros();
    for j in 0..6 {
        let mut plus = Vector6::zeros();
        plus[j] = h;
        let gp = se3_exp(&twist_from_vec(&plus)) * *g;
        let gm = se3_exp(&twist_from_vec(&(-plus))) * *g;
        let (rp, _) = reprojection_term(m, measured, &gp, k).unwrap();
        let (rm, _) = reprojection_term(m, measured, &gm, k).unwrap();
        let col = (rp - rm) / (2.0 * h);
        jac[(0, j)] = col[0];
        jac[(1, j)] = col[1];
    }
    jac
}

#[test]
fn analytic_jacobian_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let k = k640();
    for _ in 0..100 {
        let g = se3_exp(&Twist::from_array([
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.2..0.2),
            rng.gen_range(-0.2..0.2),
            rng.gen_range(-0.2..0.2),
        ]));
        let m = Point3::new(
            rng.gen_range(-5.0..5.0),
            rng.gen_range(-3.0..3.0),
            rng.gen_range(5.0..30.0),
        );
        let measured = ImagePoint::new(rng.gen_range(0.0..640.0), rng.gen_range(0.0..480.0));
        let Some((_, analytic)) = reprojection_term(&m, &measured, &g, &k) else {
            continue;
        };
        let fd = fd_reprojection_jacobian(&m, &measured, &g, &k);
        let rel = (analytic - fd).norm() / analytic.norm().max(1.0);
        assert!(rel < 1e-5, "relative Jacobian error {rel}");
    }
}

// ---- Joint refinement ----

#[test]
fn joint_noise_free_keeps_measured_flow_and_motion() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let k = k640();
    let t_gt = se3_exp(&Twist::from_array([0.05, 0.0, 0.8, 0.0, 0.01, 0.0]));
    let points = scatter_points(&mut rng, 150);
    let corrs = camera_corrs(&points, &t_gt, &k);
    let cfg = SolverConfig::default();
    let only = estimate_camera_motion(&corrs, &SE3Pose::identity(), &cfg, &k).unwrap();
    let joint =
        estimate_joint(&corrs, &SE3Pose::identity(), &cfg, &k, EstimationMode::Camera).unwrap();
    let (et, er) = pose_diff(&joint.motion, &only.motion);
    assert!(et < 1e-8 && er < 1e-8, "joint/motion-only disagree: {et}, {er}");
    let refined = joint.refined_flow.unwrap();
    for (c, f) in corrs.iter().zip(&refined) {
        assert!((f.du - c.flow.du).abs() < 1e-8 && (f.dv - c.flow.dv).abs() < 1e-8);
    }
}

#[test]
fn joint_reduces_flow_epe_under_gaussian_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let k = k640();
    let t_gt = se3_exp(&Twist::from_array([0.0, 0.0, 0.8, 0.0, 0.0, 0.0]));
    let points = scatter_points(&mut rng, 400);
    let clean = camera_corrs(&points, &t_gt, &k);
    let mut noisy = clean.clone();
    use rand_distr::{Distribution, Normal};
    let gauss = Normal::new(0.0, 0.3).unwrap();
    for c in &mut noisy {
        c.flow.du += gauss.sample(&mut rng);
        c.flow.dv += gauss.sample(&mut rng);
    }
    let res = estimate_joint(
        &noisy,
        &SE3Pose::identity(),
        &SolverConfig::default(),
        &k,
        EstimationMode::Camera,
    )
    .unwrap();
    let refined = res.refined_flow.unwrap();
    let epe_before: f64 = noisy
        .iter()
        .zip(&clean)
        .map(|(n, c)| (n.flow - c.flow).norm())
        .sum::<f64>()
        / clean.len() as f64;
    let epe_after: f64 = refined
        .iter()
        .zip(&clean)
        .map(|(r, c)| (*r - c.flow).norm())
        .sum::<f64>()
        / clean.len() as f64;
    assert!(
        epe_after < epe_before,
        "EPE did not decrease: {epe_before} -> {epe_after}"
    );
}

#[test]
fn joint_tracks_motion_only_under_mixed_noise() {
    // Marginalizing the per-point flow out of the joint cost leaves a
    // reweighted robust kernel over the same residuals, so the two modes
    // land on nearly the same motion; the joint mode's gain is the
    // denoised flow, checked separately above.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let k = k640();
    let t_gt = se3_exp(&Twist::from_array([0.0, 0.0, 0.8, 0.0, 0.005, 0.0]));
    let points = scatter_points(&mut rng, 600);
    let mut corrs = camera_corrs(&points, &t_gt, &k);
    use rand_distr::{Distribution, Normal};
    let gauss = Normal::new(0.0, 0.3).unwrap();
    for c in &mut corrs {
        c.flow.du += gauss.sample(&mut rng);
        c.flow.dv += gauss.sample(&mut rng);
        if rng.gen_bool(0.10) {
            c.flow.du += rng.gen_range(-15.0..15.0);
            c.flow.dv += rng.gen_range(-15.0..15.0);
        }
    }
    let cfg = SolverConfig::default();
    let only = estimate_camera_motion(&corrs, &SE3Pose::identity(), &cfg, &k).unwrap();
    let joint =
        estimate_joint(&corrs, &SE3Pose::identity(), &cfg, &k, EstimationMode::Camera).unwrap();
    let (et_only, _) = pose_diff(&only.motion, &t_gt);
    let (et_joint, _) = pose_diff(&joint.motion, &t_gt);
    assert!(
        et_joint < 2.0 * et_only + 1e-6,
        "joint {et_joint} drifted far from motion-only {et_only}"
    );
}

// ---- Initialization ----

#[test]
fn propagation_init() {
    assert!(init_by_propagation(None).translation().norm() < 1e-15);
    let prev = se3_exp(&Twist::from_array([0.5, 0.0, 0.0, 0.0, 0.0, 0.0]));
    let p = init_by_propagation(Some(&prev));
    let (et, er) = pose_diff(&p, &prev);
    assert!(et < 1e-15 && er < 1e-15);
}

#[test]
fn p3p_ransac_noise_free_recovery() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let k = k640();
    let t_gt = se3_exp(&Twist::from_array([0.2, -0.1, 0.7, 0.01, 0.03, -0.02]));
    let points = scatter_points(&mut rng, 120);
    let corrs = camera_corrs(&points, &t_gt, &k);
    let (pose, mask) =
        init_by_p3p_ransac(&corrs, &SolverConfig::default(), &k, &mut rng).unwrap();
    let (et, er) = pose_diff(&pose, &t_gt);
    assert!(et < 1e-6 && er < 1e-6, "E_t = {et}, E_R = {er}");
    assert_eq!(mask.iter().filter(|&&b| b).count(), corrs.len());
}

#[test]
fn p3p_ransac_resists_thirty_percent_outliers() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let k = k640();
    let t_gt = se3_exp(&Twist::from_array([0.1, 0.05, 0.8, 0.0, 0.02, 0.01]));
    let points = scatter_points(&mut rng, 150);
    let mut corrs = camera_corrs(&points, &t_gt, &k);
    let n = corrs.len();
    for i in 0..(3 * n / 10) {
        corrs[i].flow.du += rng.gen_range(-20.0..20.0);
        corrs[i].flow.dv += rng.gen_range(-20.0..20.0);
    }
    let (pose, _) = init_by_p3p_ransac(&corrs, &SolverConfig::default(), &k, &mut rng).unwrap();
    let (et, er) = pose_diff(&pose, &t_gt);
    assert!(et < 1e-3, "E_t = {et}");
    assert!(er < 1e-2, "E_R = {er}");
}

#[test]
fn p3p_ransac_fails_on_collinear_points() {
    let k = k640();
    let t_gt = se3_exp(&Twist::from_array([0.0, 0.0, 0.5, 0.0, 0.0, 0.0]));
    let points: Vec<Point3> = (0..30).map(|i| Point3::new(i as f64 * 0.2 - 3.0, 0.0, 10.0)).collect();
    let corrs = camera_corrs(&points, &t_gt, &k);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    match init_by_p3p_ransac(&corrs, &SolverConfig::default(), &k, &mut rng) {
        Err(EstimateError::InitFailed) => {}
        other => panic!("expected InitFailed, got {other:?}"),
    }
}

#[test]
fn p3p_ransac_is_deterministic_under_seed() {
    let mut rng_a = ChaCha8Rng::seed_from_u64(99);
    let mut rng_b = ChaCha8Rng::seed_from_u64(99);
    let k = k640();
    let t_gt = se3_exp(&Twist::from_array([0.1, 0.0, 0.6, 0.0, 0.01, 0.0]));
    let mut seed_rng = ChaCha8Rng::seed_from_u64(16);
    let points = scatter_points(&mut seed_rng, 100);
    let mut corrs = camera_corrs(&points, &t_gt, &k);
    for i in 0..20 {
        corrs[i].flow.du += seed_rng.gen_range(-10.0..10.0);
    }
    let (a, _) = init_by_p3p_ransac(&corrs, &SolverConfig::default(), &k, &mut rng_a).unwrap();
    let (b, _) = init_by_p3p_ransac(&corrs, &SolverConfig::default(), &k, &mut rng_b).unwrap();
    assert_eq!(a.to_matrix_3x4(), b.to_matrix_3x4());
}

#[test]
fn select_model_rules() {
    let a = se3_exp(&Twist::from_array([1.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
    let b = se3_exp(&Twist::from_array([0.0, 1.0, 0.0, 0.0, 0.0, 0.0]));
    let picked = select_model(&[(a, 120), (b, 80)]).unwrap();
    assert_eq!(picked.to_matrix_3x4(), a.to_matrix_3x4());
    let picked = select_model(&[(a, 80), (b, 120)]).unwrap();
    assert_eq!(picked.to_matrix_3x4(), b.to_matrix_3x4());
    // Ties go to the first entry (the propagation model by caller convention).
    let picked = select_model(&[(a, 100), (b, 100)]).unwrap();
    assert_eq!(picked.to_matrix_3x4(), a.to_matrix_3x4());
    let picked = select_model(&[(b, 7)]).unwrap();
    assert_eq!(picked.to_matrix_3x4(), b.to_matrix_3x4());
    assert!(matches!(select_model(&[]), Err(EstimateError::EmptyCandidates)));
}

#[test]
fn huber_kernel_shape() {
    let k = HuberKernel::new(1.345);
    assert_eq!(k.cost(0.0), 0.0);
    // quadratic below delta, linear above (in the residual norm)
    let below = 1.0;
    assert_eq!(k.cost(below * below), below * below);
    let above: f64 = 10.0;
    assert!((k.cost(above * above) - (2.0 * 1.345 * above - 1.345 * 1.345)).abs() < 1e-12);
    // monotone non-decreasing
    let mut prev = 0.0;
    for i in 1..100 {
        let s = i as f64 * 0.1;
        let c = k.cost(s);
        assert!(c >= prev);
        prev = c;
    }
}

#[test]
fn single_gross_outlier_barely_moves_solution() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let k = k640();
    let t_gt = se3_exp(&Twist::from_array([0.1, 0.0, 0.8, 0.0, 0.01, 0.0]));
    let points = scatter_points(&mut rng, 200);
    let clean = camera_corrs(&points, &t_gt, &k);

    let solve = |corrs: &[Correspondence], rng: &mut ChaCha8Rng| {
        let cfg = SolverConfig::default();
        let (init, _) = init_by_p3p_ransac(corrs, &cfg, &k, rng).unwrap();
        estimate_camera_motion(corrs, &init, &cfg, &k).unwrap().motion
    };
    let mut rng_a = ChaCha8Rng::seed_from_u64(100);
    let baseline = solve(&clean, &mut rng_a);
    let mut corrupted = clean.clone();
    corrupted[42].flow.du += 100.0;
    let mut rng_b = ChaCha8Rng::seed_from_u64(100);
    let poisoned = solve(&corrupted, &mut rng_b);
    let (et, er) = pose_diff(&baseline, &poisoned);
    assert!(et < 1e-3, "outlier moved the solution by {et} m");
    assert!(er < 1e-2, "outlier moved the solution by {er} deg");
}
