//! Perspective-three-point minimal solver.
//!
//! Classic distance-based formulation: the three unknown point depths along
//! the bearing rays satisfy the law-of-cosines system, which reduces to a
//! quartic in the ratio of two depths. Real quartic roots are recovered from
//! the companion-matrix eigenvalues and polished with Newton steps, the
//! depths are reconstructed, and the rigid transform is recovered with a
//! three-point Kabsch alignment.

use crate::geometry::{Point3, SE3Pose};
use nalgebra::{Matrix3, Matrix4, Vector3};

/// Returns the candidate poses `W` with `y_i = W * p_i`, where `y_i` lies
/// along `bearings[i]` (unit vectors) at positive depth. Up to four
/// solutions; degenerate configurations yield none.
pub fn solve_p3p(points: &[Point3; 3], bearings: &[Vector3<f64>; 3]) -> Vec<SE3Pose> {
    let a2 = (points[1] - points[2]).norm_squared();
    let b2 = (points[0] - points[2]).norm_squared();
    let c2 = (points[0] - points[1]).norm_squared();
    if a2 <= 0.0 || b2 <= 0.0 || c2 <= 0.0 {
        return Vec::new();
    }
    let cab = bearings[0].dot(&bearings[1]);
    let cac = bearings[0].dot(&bearings[2]);
    let cbc = bearings[1].dot(&bearings[2]);

    let a1 = a2 / b2;
    let b1 = c2 / b2;

    // With s2 = u s1, s3 = v s1, u eliminates linearly:
    //   u * d(v) = n(v),  d(v) = 2 (v cbc - cab)
    //   n(v) = (1 - a1 + b1) v^2 + 2 (a1 - b1) cac v - (1 + a1 - b1)
    // and substituting into the remaining constraint gives a quartic in v:
    //   n^2 - 2 cab n d + (1 - b1 - b1 v^2 + 2 b1 cac v) d^2 = 0
    let n_coef = [1.0 - a1 + b1, 2.0 * (a1 - b1) * cac, -(1.0 + a1 - b1)];
    let d_coef = [2.0 * cbc, -2.0 * cab];
    let q_coef = [-b1, 2.0 * b1 * cac, 1.0 - b1];

    let nn = mul_poly(&n_coef, &n_coef); // degree 4
    let nd = mul_poly(&n_coef, &d_coef); // degree 3
    let dd = mul_poly(&d_coef, &d_coef); // degree 2
    let qdd = mul_poly(&q_coef, &dd); // degree 4

    let mut quartic = [0.0f64; 5];
    for (i, v) in nn.iter().enumerate() {
        quartic[i] += v;
    }
    for (i, v) in nd.iter().enumerate() {
        quartic[i + 1] -= 2.0 * cab * v;
    }
    for (i, v) in qdd.iter().enumerate() {
        quartic[i] += v;
    }

    let mut poses = Vec::new();
    for v in real_quartic_roots(&quartic) {
        if v <= 0.0 {
            continue;
        }
        let denom = 1.0 + v * v - 2.0 * v * cac;
        if denom <= 0.0 {
            continue;
        }
        let d = 2.0 * (v * cbc - cab);
        if d.abs() < 1e-12 {
            continue;
        }
        let u = (n_coef[0] * v * v + n_coef[1] * v + n_coef[2]) / d;
        if u <= 0.0 {
            continue;
        }
        let s1 = (b2 / denom).sqrt();
        let depths = [s1, u * s1, v * s1];
        let y: Vec<Vector3<f64>> =
            (0..3).map(|i| bearings[i] * depths[i]).collect();
        if let Some(pose) = kabsch_3pt(points, &y) {
            poses.push(pose);
        }
    }
    poses
}

fn mul_poly(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &ai) in a.iter().enumerate() {
        for (j, &bj) in b.iter().enumerate() {
            out[i + j] += ai * bj;
        }
    }
    out
}

/// Real roots of a quartic given by descending coefficients, via the
/// companion matrix eigenvalues plus a few Newton polish steps.
fn real_quartic_roots(c: &[f64; 5]) -> Vec<f64> {
    let lead = c[0];
    if lead.abs() < 1e-14 * c.iter().map(|x| x.abs()).fold(0.0, f64::max) {
        return Vec::new(); // degenerate leading coefficient; caller resamples
    }
    let n = [c[1] / lead, c[2] / lead, c[3] / lead, c[4] / lead];
    #[rustfmt::skip]
    let companion = Matrix4::new(
        -n[0], -n[1], -n[2], -n[3],
        1.0, 0.0, 0.0, 0.0,
        0.0, 1.0, 0.0, 0.0,
        0.0, 0.0, 1.0, 0.0,
    );
    let eigen = companion.complex_eigenvalues();
    let mut roots = Vec::new();
    for e in eigen.iter() {
        if e.im.abs() > 1e-6 * (1.0 + e.re.abs()) {
            continue;
        }
        let mut x = e.re;
        for _ in 0..5 {
            let (p, dp) = eval_quartic(c, x);
            if dp.abs() < 1e-300 {
                break;
            }
            let step = p / dp;
            x -= step;
            if step.abs() < 1e-16 * (1.0 + x.abs()) {
                break;
            }
        }
        // Deduplicate near-equal roots from conjugate pairs.
        if !roots.iter().any(|&r: &f64| (r - x).abs() < 1e-10 * (1.0 + x.abs())) {
            roots.push(x);
        }
    }
    roots
}

fn eval_quartic(c: &[f64; 5], x: f64) -> (f64, f64) {
    let p = (((c[0] * x + c[1]) * x + c[2]) * x + c[3]) * x + c[4];
    let dp = ((4.0 * c[0] * x + 3.0 * c[1]) * x + 2.0 * c[2]) * x + c[3];
    (p, dp)
}

/// Rigid transform (R, t) with y_i = R p_i + t for three point pairs.
fn kabsch_3pt(p: &[Point3; 3], y: &[Vector3<f64>]) -> Option<SE3Pose> {
    let p_mean = (p[0].coords + p[1].coords + p[2].coords) / 3.0;
    let y_mean = (y[0] + y[1] + y[2]) / 3.0;
    let mut h = Matrix3::zeros();
    for i in 0..3 {
        h += (p[i].coords - p_mean) * (y[i] - y_mean).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u?;
    let v_t = svd.v_t?;
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant();
    let rot = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d.signum())) * u.transpose();
    let t = y_mean - rot * p_mean;
    SE3Pose::from_parts(rot, t).ok()
}
