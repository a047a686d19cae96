//! Stereo camera simulation and the matrix-weighted localization problem.
//!
//! Poses follow the convention `p_cam = C (m + t)`, so `t` is the negated
//! camera position in the world frame. The QCQP variable is
//! `x = (1, vec C, w)` with `w = C t` and `vec` column-major.

use certigrad::qcqp::{build_hom_qcqp, HomQcqp, ParamSymMatrix, QcqpError, Triplet};
use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, Unit, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const QCQP_DIM: usize = 13;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StereoError {
    #[error("landmark is behind the camera (depth {0:e})")]
    BehindCamera(f64),
    #[error("non-positive disparity {0:e}")]
    ZeroDisparity(f64),
    #[error("pixel noise must be zero in both directions or positive in both")]
    DegenerateNoise,
    #[error("need at least 3 landmarks, got {0}")]
    TooFewLandmarks(usize),
    #[error("landmarks, measurements and weights differ in length")]
    LengthMismatch,
    #[error("cross-covariance is rank deficient")]
    DegenerateConfiguration,
    #[error(transparent)]
    Qcqp(#[from] QcqpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraModel {
    pub b: f64,
    pub f_u: f64,
    pub f_v: f64,
    pub c_u: f64,
    pub c_v: f64,
    pub sigma_u: f64,
    pub sigma_v: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self { b: 0.24, f_u: 484.5, f_v: 484.5, c_u: 0.0, c_v: 0.0, sigma_u: 0.5, sigma_v: 0.5 }
    }
}

/// Left-camera pixel column, row and disparity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pixels {
    pub u: f64,
    pub v: f64,
    pub d: f64,
}

impl CameraModel {
    pub fn noiseless(self) -> Self {
        Self { sigma_u: 0.0, sigma_v: 0.0, ..self }
    }

    pub fn with_baseline(self, b: f64) -> Self {
        Self { b, ..self }
    }

    pub fn project(&self, p: &Vector3<f64>) -> Result<Pixels, StereoError> {
        if p.z <= 0.0 {
            return Err(StereoError::BehindCamera(p.z));
        }
        Ok(Pixels {
            u: self.f_u * p.x / p.z + self.c_u,
            v: self.f_v * p.y / p.z + self.c_v,
            d: self.f_u * self.b / p.z,
        })
    }

    pub fn back_project(&self, px: &Pixels) -> Result<Vector3<f64>, StereoError> {
        if px.d <= 0.0 {
            return Err(StereoError::ZeroDisparity(px.d));
        }
        let s = self.b / px.d;
        Ok(Vector3::new(s * (px.u - self.c_u), s * self.f_u / self.f_v * (px.v - self.c_v), s * self.f_u))
    }

    /// Covariance of the back-projected point, propagated to first order from
    /// independent noise on the left column, shared row and right column.
    pub fn point_covariance(&self, px: &Pixels) -> Result<Matrix3<f64>, StereoError> {
        let (su, sv) = match (self.sigma_u > 0.0, self.sigma_v > 0.0) {
            (true, true) => (self.sigma_u, self.sigma_v),
            (false, false) => (1.0, 1.0),
            _ => return Err(StereoError::DegenerateNoise),
        };
        let m = self.back_project(px)?;
        let s = self.b / px.d;
        let d_ul = Vector3::new(s, 0.0, 0.0) - m / px.d;
        let d_v = Vector3::new(0.0, s * self.f_u / self.f_v, 0.0);
        let d_ur = m / px.d;
        Ok(d_ul * d_ul.transpose() * (su * su)
            + d_v * d_v.transpose() * (sv * sv)
            + d_ur * d_ur.transpose() * (su * su))
    }

    /// Noisy pixels for a camera-frame point. The right column gets its own noise.
    pub fn measure_pixels<R: Rng + ?Sized>(&self, p: &Vector3<f64>, rng: &mut R) -> Result<Pixels, StereoError> {
        let px = self.project(p)?;
        let mut draw = |sigma: f64| if sigma > 0.0 { sigma * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
        let u_l = px.u + draw(self.sigma_u);
        let v = px.v + draw(self.sigma_v);
        let u_r = px.u - px.d + draw(self.sigma_u);
        let out = Pixels { u: u_l, v, d: u_l - u_r };
        if out.d <= 0.0 {
            return Err(StereoError::ZeroDisparity(out.d));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub c: Matrix3<f64>,
    pub t: Vector3<f64>,
}

impl Pose {
    pub fn to_camera(&self, m: &Vector3<f64>) -> Vector3<f64> {
        self.c * (m + self.t)
    }

    pub fn position(&self) -> Vector3<f64> {
        -self.t
    }

    /// QCQP variable `(1, vec C, C t)`.
    pub fn lift(&self) -> DVector<f64> {
        let mut x = DVector::zeros(QCQP_DIM);
        x[0] = 1.0;
        x.rows_mut(1, 9).copy_from_slice(self.c.as_slice());
        x.rows_mut(10, 3).copy_from(&(self.c * self.t));
        x
    }

    /// Reads `(C, t = Cᵀw)` from a QCQP variable with `x_0 = 1`.
    pub fn from_lifted(x: &DVector<f64>) -> Self {
        let c = Matrix3::from_column_slice(&x.as_slice()[1..10]);
        let w = Vector3::new(x[10], x[11], x[12]);
        Self { c, t: c.transpose() * w }
    }
}

/// Noisy stereo measurement of a world landmark and its unnormalized
/// information matrix.
pub fn stereo_measure<R: Rng + ?Sized>(
    cam: &CameraModel,
    pose: &Pose,
    landmark: &Vector3<f64>,
    rng: &mut R,
) -> Result<(Vector3<f64>, Matrix3<f64>), StereoError> {
    let px = cam.measure_pixels(&pose.to_camera(landmark), rng)?;
    let m = cam.back_project(&px)?;
    let cov = cam.point_covariance(&px)?;
    let w = cov.try_inverse().ok_or(StereoError::DegenerateNoise)?;
    Ok((m, (w + w.transpose()) * 0.5))
}

/// `side × side` landmarks evenly spaced over a `width × width` square
/// centered at the origin in the plane `z = 0`.
pub fn landmark_grid(side: usize, width: f64) -> Vec<Vector3<f64>> {
    let step = if side > 1 { width / (side - 1) as f64 } else { 0.0 };
    let start = -width / 2.0;
    let mut out = Vec::with_capacity(side * side);
    for i in 0..side {
        for j in 0..side {
            out.push(Vector3::new(start + step * j as f64, start + step * i as f64, 0.0));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoseSampling {
    pub radius: f64,
    /// Full apex angle of the cone of camera positions about the grid normal.
    pub cone_angle: f64,
    /// Full field of view that must contain the grid center.
    pub fov: f64,
    /// Largest random tilt applied after pointing the camera at the grid.
    pub max_tilt: f64,
}

impl Default for PoseSampling {
    fn default() -> Self {
        let right = std::f64::consts::FRAC_PI_2;
        Self { radius: 3.0, cone_angle: right, fov: right, max_tilt: right * 2.0 / 3.0 }
    }
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> Unit<Vector3<f64>> {
    loop {
        let v = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        if let Some(u) = Unit::try_new(v, 1e-9) {
            return u;
        }
    }
}

/// Camera on a sphere cap around the grid normal, pointed at the grid
/// center with random roll, then tilted at random and rejected unless the
/// center stays in view.
pub fn sample_pose<R: Rng + ?Sized>(cfg: &PoseSampling, rng: &mut R) -> Pose {
    let cos_min = (cfg.cone_angle / 2.0).cos();
    let cos_pol = rng.random_range(cos_min..=1.0);
    let sin_pol = (1.0 - cos_pol * cos_pol).sqrt();
    let az = rng.random_range(0.0..std::f64::consts::TAU);
    let position = Vector3::new(sin_pol * az.cos(), sin_pol * az.sin(), cos_pol) * cfg.radius;
    let z = -position.normalize();
    let helper = if z.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let x0 = helper.cross(&z).normalize();
    let y0 = z.cross(&x0);
    let roll = rng.random_range(0.0..std::f64::consts::TAU);
    let (x1, y1) = (x0 * roll.cos() + y0 * roll.sin(), y0 * roll.cos() - x0 * roll.sin());
    let look_at = Matrix3::from_rows(&[x1.transpose(), y1.transpose(), z.transpose()]);
    loop {
        let tilt = Rotation3::from_axis_angle(&random_unit(rng), rng.random_range(0.0..=cfg.max_tilt));
        let c = tilt.matrix() * look_at;
        let center_cam = c * (-position);
        if center_cam.z > 0.0 && center_cam.normalize().z >= (cfg.fov / 2.0).cos() {
            return Pose { c, t: -position };
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationInstance {
    pub landmarks: Vec<Vector3<f64>>,
    pub measurements: Vec<Vector3<f64>>,
    pub weights: Vec<Matrix3<f64>>,
    pub ground_truth: Pose,
    /// Baseline used to back-project the measurements; they scale linearly with it.
    pub baseline: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    Scalar,
    Matrix,
}

impl LocalizationInstance {
    /// Measures every landmark from `pose`. Matrix weights are rescaled so
    /// their mean trace is 3; scalar weighting uses identities.
    pub fn simulate<R: Rng + ?Sized>(
        cam: &CameraModel,
        pose: Pose,
        landmarks: Vec<Vector3<f64>>,
        weighting: Weighting,
        rng: &mut R,
    ) -> Result<Self, StereoError> {
        let mut measurements = Vec::with_capacity(landmarks.len());
        let mut weights = Vec::with_capacity(landmarks.len());
        for l in &landmarks {
            let (m, w) = stereo_measure(cam, &pose, l, rng)?;
            measurements.push(m);
            weights.push(w);
        }
        match weighting {
            Weighting::Scalar => weights.iter_mut().for_each(|w| *w = Matrix3::identity()),
            Weighting::Matrix => normalize_weights(&mut weights),
        }
        let inst = Self { landmarks, measurements, weights, ground_truth: pose, baseline: cam.b };
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<(), StereoError> {
        let k = self.landmarks.len();
        if self.measurements.len() != k || self.weights.len() != k {
            return Err(StereoError::LengthMismatch);
        }
        if k < 3 {
            return Err(StereoError::TooFewLandmarks(k));
        }
        Ok(())
    }

    /// Same pixels back-projected with baseline `b`.
    pub fn with_baseline(&self, b: f64) -> Self {
        let s = b / self.baseline;
        Self { measurements: self.measurements.iter().map(|m| m * s).collect(), baseline: b, ..self.clone() }
    }

    pub fn with_landmarks(&self, landmarks: Vec<Vector3<f64>>) -> Self {
        Self { landmarks, ..self.clone() }
    }

    /// `Σ e_kᵀ W_k e_k` with `e_k = m̃_k − C m_k − C t`.
    pub fn cost(&self, pose: &Pose) -> f64 {
        self.landmarks
            .iter()
            .zip(&self.measurements)
            .zip(&self.weights)
            .map(|((l, m), w)| {
                let e = m - pose.c * (l + pose.t);
                e.dot(&(w * e))
            })
            .sum()
    }

    pub fn flat_landmarks(&self) -> DVector<f64> {
        DVector::from_iterator(3 * self.landmarks.len(), self.landmarks.iter().flat_map(|l| l.iter().copied()))
    }

    pub fn from_flat_landmarks(&self, flat: &DVector<f64>) -> Self {
        let landmarks =
            (0..self.landmarks.len()).map(|k| Vector3::new(flat[3 * k], flat[3 * k + 1], flat[3 * k + 2])).collect();
        self.with_landmarks(landmarks)
    }
}

pub fn normalize_weights(weights: &mut [Matrix3<f64>]) {
    let mean_trace = weights.iter().map(|w| w.trace()).sum::<f64>() / weights.len() as f64;
    if mean_trace > 0.0 {
        let s = 3.0 / mean_trace;
        weights.iter_mut().for_each(|w| *w *= s);
    }
}

fn vec_c_index(row: usize, col: usize) -> usize {
    1 + row + 3 * col
}

/// Residual map `e_k = E_k x`.
fn residual_map(landmark: &Vector3<f64>, measurement: &Vector3<f64>) -> DMatrix<f64> {
    let mut e = DMatrix::zeros(3, QCQP_DIM);
    for i in 0..3 {
        e[(i, 0)] = measurement[i];
        for j in 0..3 {
            e[(i, vec_c_index(i, j))] = -landmark[j];
        }
        e[(i, 10 + i)] = -1.0;
    }
    e
}

fn weighted_gram(e: &DMatrix<f64>, w: &Matrix3<f64>, d: &DMatrix<f64>) -> DMatrix<f64> {
    let wd = DMatrix::from_fn(3, 3, |r, c| w[(r, c)]) * d;
    let half = e.transpose() * wd;
    &half + half.transpose()
}

fn dense_triplets(m: &DMatrix<f64>) -> Vec<Triplet<f64>> {
    let mut out = Vec::new();
    for c in 0..m.ncols() {
        for r in 0..=c {
            if m[(r, c)] != 0.0 {
                out.push((r, c, m[(r, c)]));
            }
        }
    }
    out
}

/// Which quantities the cost matrix is differentiated against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StereoParams {
    None,
    /// Three coordinates per landmark, in landmark order.
    Landmarks,
    Baseline,
}

pub fn localization_cost(
    inst: &LocalizationInstance,
    params: StereoParams,
) -> Result<ParamSymMatrix<f64>, StereoError> {
    inst.validate()?;
    let mut q = DMatrix::zeros(QCQP_DIM, QCQP_DIM);
    let mut sens: Vec<Vec<Triplet<f64>>> = Vec::new();
    let mut d_baseline = DMatrix::zeros(QCQP_DIM, QCQP_DIM);
    for ((l, m), w) in inst.landmarks.iter().zip(&inst.measurements).zip(&inst.weights) {
        let e = residual_map(l, m);
        let wm = DMatrix::from_fn(3, 3, |r, c| w[(r, c)]);
        q += e.transpose() * &wm * &e;
        match params {
            StereoParams::None => {}
            StereoParams::Landmarks => {
                for a in 0..3 {
                    let mut d = DMatrix::zeros(3, QCQP_DIM);
                    for i in 0..3 {
                        d[(i, vec_c_index(i, a))] = -1.0;
                    }
                    sens.push(dense_triplets(&weighted_gram(&e, w, &d)));
                }
            }
            StereoParams::Baseline => {
                let mut d = DMatrix::zeros(3, QCQP_DIM);
                for i in 0..3 {
                    d[(i, 0)] = m[i] / inst.baseline;
                }
                d_baseline += weighted_gram(&e, w, &d);
            }
        }
    }
    if params == StereoParams::Baseline {
        sens.push(dense_triplets(&d_baseline));
    }
    let q = (&q + q.transpose()) * 0.5;
    let cost = ParamSymMatrix::new(QCQP_DIM, &dense_triplets(&q))?;
    Ok(if params == StereoParams::None { cost } else { cost.with_sensitivity(sens)? })
}

/// `CᵀC = I` (6), and optionally `CCᵀ = I` (6) plus right-handedness `c_i × c_j = c_k` (9).
pub fn rotation_constraints(redundant: bool) -> Result<(Vec<ParamSymMatrix<f64>>, Vec<bool>), StereoError> {
    let mut out = Vec::new();
    let mut flags = Vec::new();
    let mut push = |trip: Vec<Triplet<f64>>, redundant: bool| -> Result<(), StereoError> {
        out.push(ParamSymMatrix::new(QCQP_DIM, &trip)?);
        flags.push(redundant);
        Ok(())
    };
    let gram = |idx: &dyn Fn(usize, usize) -> usize, i: usize, j: usize| {
        let mut t: Vec<Triplet<f64>> =
            (0..3).map(|k| if i == j { (idx(k, i), idx(k, i), 1.0) } else { (idx(k, i), idx(k, j), 0.5) }).collect();
        if i == j {
            t.push((0, 0, -1.0));
        }
        t
    };
    let cols = |k: usize, i: usize| vec_c_index(k, i);
    let rows = |k: usize, i: usize| vec_c_index(i, k);
    for i in 0..3 {
        for j in i..3 {
            push(gram(&cols, i, j), false)?;
        }
    }
    if redundant {
        for i in 0..3 {
            for j in i..3 {
                push(gram(&rows, i, j), true)?;
            }
        }
        for (i, j, k) in [(0, 1, 2), (1, 2, 0), (2, 0, 1)] {
            for l in 0..3 {
                let (l1, l2) = ((l + 1) % 3, (l + 2) % 3);
                let trip = vec![
                    (vec_c_index(l1, i), vec_c_index(l2, j), 0.5),
                    (vec_c_index(l2, i), vec_c_index(l1, j), -0.5),
                    (0, vec_c_index(l, k), -0.5),
                ];
                push(trip, true)?;
            }
        }
    }
    Ok((out, flags))
}

pub fn build_localization_qcqp(
    inst: &LocalizationInstance,
    redundant: bool,
    params: StereoParams,
) -> Result<HomQcqp<f64>, StereoError> {
    let cost = localization_cost(inst, params)?;
    let (cons, flags) = rotation_constraints(redundant)?;
    Ok(build_hom_qcqp(cost, cons, 0)?.with_redundant_flags(flags)?)
}

/// `∂(vec C, t)/∂x` at a lifted point, as a `12 × 13` matrix.
pub fn pose_output_jacobian(x: &DVector<f64>) -> DMatrix<f64> {
    let pose = Pose::from_lifted(x);
    let w = Vector3::new(x[10], x[11], x[12]);
    let mut s = DMatrix::zeros(12, QCQP_DIM);
    for k in 0..9 {
        s[(k, 1 + k)] = 1.0;
    }
    for a in 0..3 {
        for i in 0..3 {
            s[(9 + a, vec_c_index(i, a))] = w[i];
            s[(9 + a, 10 + i)] = pose.c[(i, a)];
        }
    }
    s
}

pub fn pose_vector(p: &Pose) -> DVector<f64> {
    let mut v = DVector::zeros(12);
    v.rows_mut(0, 9).copy_from_slice(p.c.as_slice());
    v.rows_mut(9, 3).copy_from(&p.t);
    v
}

/// Outer calibration loss `‖t − t_gt‖² + ‖CᵀC_gt − I‖²_F`.
pub fn pose_loss(est: &Pose, gt: &Pose) -> f64 {
    (est.t - gt.t).norm_squared() + (est.c.transpose() * gt.c - Matrix3::identity()).norm_squared()
}

/// Gradient of [`pose_loss`] with respect to the lifted variable.
pub fn pose_loss_grad(x: &DVector<f64>, gt: &Pose) -> DVector<f64> {
    let est = Pose::from_lifted(x);
    let w = Vector3::new(x[10], x[11], x[12]);
    let r = (est.t - gt.t) * 2.0;
    let f = est.c.transpose() * gt.c - Matrix3::identity();
    let d_c = gt.c * f.transpose() * 2.0 + w * r.transpose();
    let d_w = est.c * r;
    let mut g = DVector::zeros(QCQP_DIM);
    g.rows_mut(1, 9).copy_from_slice(d_c.as_slice());
    g.rows_mut(10, 3).copy_from(&d_w);
    g
}

/// Closed-form weighted registration for scalar weights `W_k = w_k I`.
pub fn umeyama_solve(inst: &LocalizationInstance) -> Result<Pose, StereoError> {
    inst.validate()?;
    let wts: Vec<f64> = inst.weights.iter().map(|w| w.trace() / 3.0).collect();
    let total: f64 = wts.iter().sum();
    let mean = |pts: &[Vector3<f64>]| pts.iter().zip(&wts).fold(Vector3::zeros(), |acc, (p, w)| acc + p * *w) / total;
    let (l_bar, m_bar) = (mean(&inst.landmarks), mean(&inst.measurements));
    let mut h = Matrix3::zeros();
    for ((l, m), w) in inst.landmarks.iter().zip(&inst.measurements).zip(&wts) {
        h += (m - m_bar) * (l - l_bar).transpose() * *w;
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested U"), svd.v_t.expect("requested Vᵀ"));
    let sv = svd.singular_values;
    if sv[1] <= 1e-12 * sv[0].max(f64::MIN_POSITIVE) {
        return Err(StereoError::DegenerateConfiguration);
    }
    let det = (u * v_t).determinant().signum();
    let c = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, det)) * v_t;
    let w = m_bar - c * l_bar;
    Ok(Pose { c, t: c.transpose() * w })
}

/// Rotation angle between `C_a` and `C_b` and translation distance. The
/// angle comes from the chordal distance `‖C_a − C_b‖_F = 2√2 sin(θ/2)`,
/// which stays accurate for tiny angles.
pub fn pose_difference(a: &Pose, b: &Pose) -> (f64, f64) {
    let chord = (a.c - b.c).norm() / (2.0 * std::f64::consts::SQRT_2);
    (2.0 * chord.min(1.0).asin(), (a.t - b.t).norm())
}
