//! Python bindings for the multi-body visual odometry engine.
//!
//! Exposes the core geometry types and operations, the pose/velocity
//! metrics, the synthetic scene generator, and a one-call pipeline runner
//! that returns the evaluation report as JSON.

use mbvo::dataio::{generate_synthetic, load_sequence, write_sequence, SequenceManifest, SyntheticSceneSpec};
use mbvo::eval::{build_report, object_velocity, pose_change_error};
use mbvo::geometry::{
    self, se3_exp, se3_log, ImagePoint, Point3, SE3Pose, Twist,
};
use mbvo::pipeline::{run_sequence, PipelineConfig, SolveMode};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use std::path::Path;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Pinhole intrinsics with a shared focal length.
#[pyclass(name = "Intrinsics")]
#[derive(Clone)]
struct PyIntrinsics {
    inner: geometry::Intrinsics,
}

#[pymethods]
impl PyIntrinsics {
    #[new]
    fn new(f: f64, cu: f64, cv: f64, width: u32, height: u32) -> PyResult<Self> {
        Ok(Self { inner: geometry::Intrinsics::new(f, cu, cv, width, height).map_err(value_err)? })
    }

    #[getter]
    fn f(&self) -> f64 {
        self.inner.f
    }

    #[getter]
    fn cu(&self) -> f64 {
        self.inner.cu
    }

    #[getter]
    fn cv(&self) -> f64 {
        self.inner.cv
    }

    fn __repr__(&self) -> String {
        let k = &self.inner;
        format!("Intrinsics(f={}, cu={}, cv={}, width={}, height={})", k.f, k.cu, k.cv, k.width, k.height)
    }
}

/// Rigid SE(3) transformation.
#[pyclass(name = "Pose")]
#[derive(Clone)]
struct PyPose {
    inner: SE3Pose,
}

#[pymethods]
impl PyPose {
    /// Identity transformation.
    #[staticmethod]
    fn identity() -> Self {
        Self { inner: SE3Pose::identity() }
    }

    /// Exponential map of a twist [rho_x, rho_y, rho_z, omega_x, omega_y, omega_z].
    #[staticmethod]
    fn exp(twist: [f64; 6]) -> Self {
        Self { inner: se3_exp(&Twist::from_array(twist)) }
    }

    /// Build from a row-major 3x4 [R | t] flattening.
    #[staticmethod]
    fn from_matrix(values: [f64; 12]) -> PyResult<Self> {
        Ok(Self { inner: SE3Pose::from_matrix_3x4(&values).map_err(value_err)? })
    }

    /// Logarithm map; fails at a half-turn rotation.
    fn log(&self) -> PyResult<[f64; 6]> {
        Ok(se3_log(&self.inner).map_err(value_err)?.to_array())
    }

    fn inverse(&self) -> Self {
        Self { inner: self.inner.inverse() }
    }

    fn __mul__(&self, other: &PyPose) -> Self {
        Self { inner: self.inner * other.inner }
    }

    /// Apply to a 3D point: R p + t.
    fn apply(&self, point: [f64; 3]) -> [f64; 3] {
        let q = self.inner.apply(&Point3::new(point[0], point[1], point[2]));
        [q.x, q.y, q.z]
    }

    fn translation(&self) -> [f64; 3] {
        let t = self.inner.translation();
        [t.x, t.y, t.z]
    }

    /// Rotation angle in radians.
    fn rotation_angle(&self) -> f64 {
        self.inner.rotation_angle()
    }

    /// Row-major 3x4 [R | t] flattening.
    fn matrix(&self) -> [f64; 12] {
        self.inner.to_matrix_3x4()
    }

    fn __repr__(&self) -> String {
        let t = self.inner.translation();
        format!(
            "Pose(t=[{:.4}, {:.4}, {:.4}], angle={:.4} rad)",
            t.x,
            t.y,
            t.z,
            self.inner.rotation_angle()
        )
    }
}

/// Lift a pixel with depth (meters) to a camera-frame 3D point.
#[pyfunction]
fn backproject(pixel: [f64; 2], depth: f64, k: &PyIntrinsics) -> PyResult<[f64; 3]> {
    let m = geometry::backproject(ImagePoint::new(pixel[0], pixel[1]), depth, &k.inner)
        .map_err(value_err)?;
    Ok([m.x, m.y, m.z])
}

/// Project a camera-frame 3D point to a pixel.
#[pyfunction]
fn project(point: [f64; 3], k: &PyIntrinsics) -> PyResult<[f64; 2]> {
    let p = geometry::project(&Point3::new(point[0], point[1], point[2]), &k.inner)
        .map_err(value_err)?;
    Ok([p.u, p.v])
}

/// Predicted pixel of a static k-1 point after the camera motion.
#[pyfunction]
fn predict_static_point(point: [f64; 3], camera_motion: &PyPose, k: &PyIntrinsics) -> PyResult<[f64; 2]> {
    let p = geometry::predict_static_point(
        &Point3::new(point[0], point[1], point[2]),
        &camera_motion.inner,
        &k.inner,
    )
    .map_err(value_err)?;
    Ok([p.u, p.v])
}

/// Object motion in the earlier camera frame: H = T * X.
#[pyfunction]
fn recover_object_motion(camera_motion: &PyPose, x: &PyPose) -> PyPose {
    PyPose { inner: geometry::recover_object_motion(&camera_motion.inner, &x.inner) }
}

/// (E_t meters, E_R degrees) of est against gt.
#[pyfunction]
fn pose_error(est: &PyPose, gt: &PyPose) -> (f64, f64) {
    let e = pose_change_error(&est.inner, &gt.inner);
    (e.translation_m, e.rotation_deg)
}

/// Object speed in km/h from its motion, centroid, and frame period.
#[pyfunction]
fn velocity_kmh(motion: &PyPose, centroid: [f64; 3], period: f64) -> PyResult<f64> {
    object_velocity(
        &motion.inner,
        &Point3::new(centroid[0], centroid[1], centroid[2]),
        period,
    )
    .map_err(value_err)
}

/// Render a synthetic scene from a spec (JSON string) into `out_dir`;
/// returns the manifest path.
#[pyfunction]
fn generate_scene(spec_json: &str, out_dir: &str) -> PyResult<String> {
    let spec: SyntheticSceneSpec = serde_json::from_str(spec_json).map_err(value_err)?;
    spec.validate().map_err(value_err)?;
    let seq = generate_synthetic(&spec).map_err(value_err)?;
    std::fs::create_dir_all(out_dir).map_err(|e| PyIOError::new_err(e.to_string()))?;
    let manifest = write_sequence(&seq, Path::new(out_dir)).map_err(value_err)?;
    Ok(manifest.display().to_string())
}

/// Run the full pipeline over a manifest and return the evaluation report
/// as a JSON string (errors included when the manifest has ground truth).
#[pyfunction]
#[pyo3(signature = (manifest_path, seed = 0, mode = "joint"))]
fn run_pipeline(manifest_path: &str, seed: u64, mode: &str) -> PyResult<String> {
    let manifest = SequenceManifest::load(Path::new(manifest_path)).map_err(value_err)?;
    let frames = load_sequence(&manifest).map_err(value_err)?;
    let gt = manifest.ground_truth().map_err(value_err)?;
    let mut cfg = PipelineConfig::default();
    cfg.seed = seed;
    cfg.mode = match mode {
        "joint" => SolveMode::Joint,
        "motion-only" => SolveMode::MotionOnly,
        other => return Err(PyValueError::new_err(format!("unknown mode `{other}`"))),
    };
    let results = run_sequence(&frames, &cfg, None).map_err(value_err)?;
    let report = build_report(&results, gt.as_ref(), &cfg, manifest.period);
    serde_json::to_string_pretty(&report).map_err(value_err)
}

#[pymodule]
fn mbvo_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyIntrinsics>()?;
    m.add_class::<PyPose>()?;
    m.add_function(wrap_pyfunction!(backproject, m)?)?;
    m.add_function(wrap_pyfunction!(project, m)?)?;
    m.add_function(wrap_pyfunction!(predict_static_point, m)?)?;
    m.add_function(wrap_pyfunction!(recover_object_motion, m)?)?;
    m.add_function(wrap_pyfunction!(pose_error, m)?)?;
    m.add_function(wrap_pyfunction!(velocity_kmh, m)?)?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
