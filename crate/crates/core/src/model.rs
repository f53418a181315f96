//! Domain types and the validated model parameters shared by the tracker,
//! the simulator and the learned refinement layer.

use nalgebra::{DMatrix, Matrix2, Matrix2x4, Matrix4, SymmetricEigen, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TrackId = u64;

/// 2-D position and velocity, state ordering `[px, py, vx, vy]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct KinematicState {
    pub px: f64,
    pub py: f64,
    pub vx: f64,
    pub vy: f64,
}

impl KinematicState {
    pub const fn new(px: f64, py: f64, vx: f64, vy: f64) -> Self {
        Self { px, py, vx, vy }
    }

    pub fn to_vector(self) -> Vector4<f64> {
        Vector4::new(self.px, self.py, self.vx, self.vy)
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn is_finite(&self) -> bool {
        self.px.is_finite() && self.py.is_finite() && self.vx.is_finite() && self.vy.is_finite()
    }

    pub fn position(&self) -> [f64; 2] {
        [self.px, self.py]
    }
}

/// Whether a potential object was carried over from an earlier frame or was
/// spawned by a measurement of the current frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PoKind {
    Legacy,
    /// `p_unassociated` is the marginal probability that the spawning
    /// measurement is not explained by any legacy object.
    New { p_unassociated: f64 },
}

/// Particle belief over the kinematic state plus a Bernoulli existence
/// probability.
///
/// Nonexistence is carried only by `1 - existence`; the particle set always
/// describes the state conditioned on existence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialObject {
    pub particles: Vec<KinematicState>,
    pub weights: Vec<f64>,
    pub existence: f64,
    pub track_id: TrackId,
    pub kind: PoKind,
    /// Running shape descriptor estimate. Empty when no descriptor is known.
    #[serde(default)]
    pub shape: Vec<f64>,
    /// Measurement-score evidence of the last update: `sum_j p(a = j) s_j`
    /// for legacy objects, `s_j` for new ones.
    #[serde(default)]
    pub score_evidence: f64,
}

pub const WEIGHT_SUM_TOL: f64 = 1e-9;

impl PotentialObject {
    pub fn new(
        particles: Vec<KinematicState>,
        weights: Vec<f64>,
        existence: f64,
        track_id: TrackId,
        kind: PoKind,
    ) -> Result<Self> {
        let po = Self {
            particles,
            weights,
            existence,
            track_id,
            kind,
            shape: Vec::new(),
            score_evidence: 0.0,
        };
        po.validate()?;
        Ok(po)
    }

    /// Equal-weight object from a particle cloud.
    pub fn uniform(
        particles: Vec<KinematicState>,
        existence: f64,
        track_id: TrackId,
        kind: PoKind,
    ) -> Result<Self> {
        let n = particles.len().max(1);
        let weights = vec![1.0 / n as f64; particles.len()];
        Self::new(particles, weights, existence, track_id, kind)
    }

    pub fn validate(&self) -> Result<()> {
        if self.particles.is_empty() {
            return Err(Error::param("particles", "particle set is empty"));
        }
        if self.particles.len() != self.weights.len() {
            return Err(Error::Shape {
                expected: self.particles.len(),
                actual: self.weights.len(),
            });
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::param("weights", "weights must be finite and nonnegative"));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::param("weights", format!("weights sum to {sum}, not 1")));
        }
        if !(0.0..=1.0).contains(&self.existence) {
            return Err(Error::param(
                "existence",
                format!("{} is outside [0, 1]", self.existence),
            ));
        }
        if self.particles.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("particle state".into()));
        }
        Ok(())
    }

    /// Weighted particle mean (the MMSE estimate).
    pub fn mean(&self) -> KinematicState {
        let mut acc = Vector4::zeros();
        for (p, w) in self.particles.iter().zip(&self.weights) {
            acc += p.to_vector() * *w;
        }
        KinematicState::from_vector(&acc)
    }

    /// Weighted sample covariance of the particle cloud.
    pub fn covariance(&self) -> Matrix4<f64> {
        let mean = self.mean().to_vector();
        let mut cov = Matrix4::zeros();
        for (p, w) in self.particles.iter().zip(&self.weights) {
            let d = p.to_vector() - mean;
            cov += d * d.transpose() * *w;
        }
        cov
    }

    pub fn effective_sample_size(&self) -> f64 {
        let s2: f64 = self.weights.iter().map(|w| w * w).sum();
        if s2 > 0.0 {
            1.0 / s2
        } else {
            0.0
        }
    }

    /// Renormalizes weights; falls back to uniform weights when they all vanish.
    pub fn normalize_weights(&mut self) {
        let sum: f64 = self.weights.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            self.weights.iter_mut().for_each(|w| *w /= sum);
        } else {
            let n = self.weights.len() as f64;
            self.weights.iter_mut().for_each(|w| *w = 1.0 / n);
        }
    }
}

/// One detection: kinematics, detector confidence and a shape descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub px: f64,
    pub py: f64,
    pub vx: f64,
    pub vy: f64,
    pub score: f64,
    pub shape: Vec<f64>,
}

impl Measurement {
    pub fn position(&self) -> [f64; 2] {
        [self.px, self.py]
    }

    pub fn validate(&self, shape_dim: Option<usize>) -> Result<()> {
        if ![self.px, self.py, self.vx, self.vy].iter().all(|v| v.is_finite())
            || self.shape.iter().any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("measurement".into()));
        }
        if !(self.score > 0.0 && self.score <= 1.0) {
            return Err(Error::param("score", format!("{} is outside (0, 1]", self.score)));
        }
        if let Some(d) = shape_dim {
            if self.shape.len() != d {
                return Err(Error::Shape {
                    expected: d,
                    actual: self.shape.len(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MeasurementFrame {
    pub measurements: Vec<Measurement>,
}

impl MeasurementFrame {
    pub fn new(measurements: Vec<Measurement>) -> Self {
        Self { measurements }
    }

    pub fn len(&self) -> usize {
        self.measurements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measurements.is_empty()
    }

    /// Drops measurements outside the region of interest, where the clutter
    /// density is zero and likelihood ratios are undefined.
    pub fn restricted_to(&self, roi: &Roi) -> MeasurementFrame {
        MeasurementFrame {
            measurements: self
                .measurements
                .iter()
                .filter(|m| roi.contains(m.px, m.py))
                .cloned()
                .collect(),
        }
    }
}

/// Axis-aligned rectangle, serialized as `[x_min, y_min, x_max, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct Roi {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl From<[f64; 4]> for Roi {
    fn from(v: [f64; 4]) -> Self {
        Roi {
            x_min: v[0],
            y_min: v[1],
            x_max: v[2],
            y_max: v[3],
        }
    }
}

impl From<Roi> for [f64; 4] {
    fn from(r: Roi) -> Self {
        [r.x_min, r.y_min, r.x_max, r.y_max]
    }
}

impl Roi {
    pub fn square(half_width: f64) -> Self {
        Roi {
            x_min: -half_width,
            y_min: -half_width,
            x_max: half_width,
            y_max: half_width,
        }
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    pub fn center(&self) -> [f64; 2] {
        [
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        ]
    }

    pub fn half_extent(&self) -> [f64; 2] {
        [
            0.5 * (self.x_max - self.x_min),
            0.5 * (self.y_max - self.y_min),
        ]
    }
}

/// Serializes a dynamic matrix as an array of rows.
pub mod matrix_rows {
    use nalgebra::DMatrix;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = (0..m.nrows())
            .map(|r| m.row(r).iter().copied().collect())
            .collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(D::Error::custom("ragged matrix rows"));
        }
        Ok(DMatrix::from_row_iterator(
            nrows,
            ncols,
            rows.into_iter().flatten(),
        ))
    }
}

/// Model parameters of the statistical tracking model.
///
/// Serializes to a flat JSON object; matrices are nested row arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub p_d: f64,
    pub p_s: f64,
    pub mu_fa: f64,
    pub mu_u: f64,
    pub roi: Roi,
    /// Observation map from `[px, py, vx, vy]` to the measured position (2x4).
    #[serde(with = "matrix_rows")]
    pub meas_matrix: DMatrix<f64>,
    #[serde(with = "matrix_rows")]
    pub meas_cov: DMatrix<f64>,
    #[serde(with = "matrix_rows")]
    pub proc_cov: DMatrix<f64>,
    pub dt: f64,
    pub t_dec: f64,
    pub t_pru: f64,
    pub t_new: f64,
    pub n_particles: usize,
    #[serde(rename = "L_da")]
    pub l_da: usize,
    pub da_tol: f64,
    /// Squared Mahalanobis gate; `None` disables gating.
    #[serde(default)]
    pub gate: Option<f64>,
    /// Standard deviation of the velocity prior around a measurement's
    /// velocity when a new object is spawned.
    #[serde(default = "default_birth_vel_std")]
    pub birth_vel_std: f64,
}

fn default_birth_vel_std() -> f64 {
    1.0
}

/// Discrete white-noise-acceleration covariance for state `[px, py, vx, vy]`.
pub fn white_noise_acceleration(dt: f64, accel_std: f64) -> DMatrix<f64> {
    let q = accel_std * accel_std;
    let a = q * dt.powi(4) / 4.0;
    let b = q * dt.powi(3) / 2.0;
    let c = q * dt * dt;
    #[rustfmt::skip]
    let m = DMatrix::from_row_slice(4, 4, &[
        a,   0.0, b,   0.0,
        0.0, a,   0.0, b,
        b,   0.0, c,   0.0,
        0.0, b,   0.0, c,
    ]);
    m
}

pub const DEFAULT_ACCEL_STD: f64 = 1.0;

impl Default for ModelParams {
    /// Defaults: 2 Hz frames, 108 m square region, position-only
    /// measurements with 0.5 m noise, and white-noise acceleration with
    /// `DEFAULT_ACCEL_STD` m/s^2 (the acceleration level is a modelling
    /// choice, not a measured quantity).
    fn default() -> Self {
        let dt = 0.5;
        ModelParams {
            p_d: 0.9,
            p_s: 0.999,
            mu_fa: 5.0,
            mu_u: 0.1,
            roi: Roi::square(54.0),
            meas_matrix: position_observation(),
            meas_cov: DMatrix::from_diagonal_element(2, 2, 0.25),
            proc_cov: white_noise_acceleration(dt, DEFAULT_ACCEL_STD),
            dt,
            t_dec: 0.5,
            t_pru: 1e-3,
            t_new: 0.8,
            n_particles: 500,
            l_da: 200,
            da_tol: 1e-10,
            gate: Some(13.8),
            birth_vel_std: default_birth_vel_std(),
        }
    }
}

pub fn position_observation() -> DMatrix<f64> {
    #[rustfmt::skip]
    let h = DMatrix::from_row_slice(2, 4, &[
        1.0, 0.0, 0.0, 0.0,
        0.0, 1.0, 0.0, 0.0,
    ]);
    h
}

fn check_unit(field: &'static str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::param(field, format!("{v} is outside [0, 1]")))
    }
}

fn check_open_closed_unit(field: &'static str, v: f64) -> Result<()> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(Error::param(field, format!("{v} is outside (0, 1]")))
    }
}

fn symmetric_eigenvalues(field: &'static str, m: &DMatrix<f64>, dim: usize) -> Result<Vec<f64>> {
    if m.nrows() != dim || m.ncols() != dim {
        return Err(Error::param(
            field,
            format!("expected {dim}x{dim}, got {}x{}", m.nrows(), m.ncols()),
        ));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::param(field, "entries must be finite"));
    }
    let scale = m.iter().fold(0.0_f64, |a, v| a.max(v.abs())).max(1e-300);
    for r in 0..dim {
        for c in 0..r {
            if (m[(r, c)] - m[(c, r)]).abs() > 1e-9 * scale {
                return Err(Error::param(field, "matrix is not symmetric"));
            }
        }
    }
    Ok(SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().collect())
}

impl ModelParams {
    /// Returns the parameters unchanged if every invariant holds, otherwise
    /// the first violated one.
    pub fn validate(self) -> Result<Self> {
        check_open_closed_unit("p_d", self.p_d)?;
        check_open_closed_unit("p_s", self.p_s)?;
        if !(self.mu_fa.is_finite() && self.mu_fa > 0.0) {
            return Err(Error::param(
                "mu_fa",
                "must be positive: likelihood ratios divide by the clutter intensity",
            ));
        }
        if !(self.mu_u.is_finite() && self.mu_u >= 0.0) {
            return Err(Error::param("mu_u", "must be finite and nonnegative"));
        }
        let roi = self.roi;
        if !(roi.x_max > roi.x_min && roi.y_max > roi.y_min && roi.area().is_finite()) {
            return Err(Error::param("roi", "region must have positive finite area"));
        }
        if self.meas_matrix.nrows() != 2 || self.meas_matrix.ncols() != 4 {
            return Err(Error::param(
                "meas_matrix",
                format!(
                    "expected a 2x4 position observation, got {}x{}",
                    self.meas_matrix.nrows(),
                    self.meas_matrix.ncols()
                ),
            ));
        }
        if self.meas_matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("meas_matrix", "entries must be finite"));
        }
        let ev = symmetric_eigenvalues("meas_cov", &self.meas_cov, 2)?;
        if ev.iter().any(|&e| e <= 0.0) {
            return Err(Error::param("meas_cov", "matrix is not positive definite"));
        }
        let ev = symmetric_eigenvalues("proc_cov", &self.proc_cov, 4)?;
        let scale = ev.iter().fold(0.0_f64, |a, e| a.max(e.abs()));
        if ev.iter().any(|&e| e < -1e-12 * scale.max(1.0)) {
            return Err(Error::param("proc_cov", "matrix is not positive semidefinite"));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::param("dt", "must be positive"));
        }
        check_unit("t_dec", self.t_dec)?;
        check_unit("t_pru", self.t_pru)?;
        check_unit("t_new", self.t_new)?;
        if self.n_particles == 0 {
            return Err(Error::param("n_particles", "must be positive"));
        }
        if self.l_da == 0 {
            return Err(Error::param("L_da", "must be positive"));
        }
        if !(self.da_tol.is_finite() && self.da_tol >= 0.0) {
            return Err(Error::param("da_tol", "must be finite and nonnegative"));
        }
        if let Some(g) = self.gate {
            if !(g > 0.0) {
                return Err(Error::param("gate", "must be positive"));
            }
        }
        if !(self.birth_vel_std.is_finite() && self.birth_vel_std >= 0.0) {
            return Err(Error::param("birth_vel_std", "must be finite and nonnegative"));
        }
        Ok(self)
    }

    pub fn transition(&self) -> Matrix4<f64> {
        let dt = self.dt;
        #[rustfmt::skip]
        let f = Matrix4::new(
            1.0, 0.0, dt,  0.0,
            0.0, 1.0, 0.0, dt,
            0.0, 0.0, 1.0, 0.0,
            0.0, 0.0, 0.0, 1.0,
        );
        f
    }

    pub fn observation(&self) -> Matrix2x4<f64> {
        Matrix2x4::from_iterator(self.meas_matrix.iter().copied())
    }

    pub fn meas_cov2(&self) -> Matrix2<f64> {
        Matrix2::from_iterator(self.meas_cov.iter().copied())
    }

    /// Square-root factor `L` with `L L^T = proc_cov`; handles singular
    /// (positive semidefinite) covariances.
    pub fn proc_noise_factor(&self) -> Matrix4<f64> {
        let q = Matrix4::from_iterator(self.proc_cov.iter().copied());
        let eig = SymmetricEigen::new(q);
        let sqrt = eig.eigenvalues.map(|e| e.max(0.0).sqrt());
        eig.eigenvectors * Matrix4::from_diagonal(&sqrt)
    }

    /// Clutter intensity `mu_fa * f_fa(z)` for a measurement inside the region.
    pub fn clutter_intensity(&self) -> f64 {
        self.mu_fa / self.roi.area()
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str::<ModelParams>(s)?.validate()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Object-oriented (`a`) and measurement-oriented (`b`) association vectors.
/// Entries are 1-based with 0 meaning "none".
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssociationVector {
    pub a: Vec<usize>,
    pub b: Vec<usize>,
}

impl AssociationVector {
    /// Builds the unique consistent `b` for `a`; fails if two objects claim
    /// the same measurement or an index is out of range.
    pub fn from_object_oriented(a: Vec<usize>, n_meas: usize) -> Result<Self> {
        let mut b = vec![0; n_meas];
        for (i, &aj) in a.iter().enumerate() {
            if aj == 0 {
                continue;
            }
            if aj > n_meas {
                return Err(Error::param("a", format!("a[{i}] = {aj} exceeds J = {n_meas}")));
            }
            if b[aj - 1] != 0 {
                return Err(Error::param("a", format!("measurement {aj} claimed twice")));
            }
            b[aj - 1] = i + 1;
        }
        Ok(Self { a, b })
    }

    pub fn from_measurement_oriented(b: Vec<usize>, n_objects: usize) -> Result<Self> {
        let flipped = Self::from_object_oriented(b, n_objects)?;
        Ok(Self {
            a: flipped.b,
            b: flipped.a,
        })
    }

    /// `Psi_{i,j}(a_i, b_j)` for 0-based `i`, `j`.
    pub fn indicator(&self, i: usize, j: usize) -> bool {
        let ai = self.a[i] == j + 1;
        let bj = self.b[j] == i + 1;
        ai == bj
    }

    pub fn is_consistent(&self) -> bool {
        self.a.iter().all(|&v| v <= self.b.len())
            && self.b.iter().all(|&v| v <= self.a.len())
            && (0..self.a.len()).all(|i| (0..self.b.len()).all(|j| self.indicator(i, j)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_params_are_valid() {
        let p = ModelParams::default().validate().unwrap();
        assert_eq!(p.p_s, 0.999);
        assert_eq!(p.t_dec, 0.5);
        assert_eq!(p.t_pru, 1e-3);
        assert_eq!(p.t_new, 0.8);
    }

    #[test]
    fn survival_probability_accepted() {
        let p = ModelParams {
            p_s: 0.999,
            ..Default::default()
        };
        assert!(p.validate().is_ok());
    }

    #[test]
    fn zero_detection_probability_rejected() {
        let p = ModelParams {
            p_d: 0.0,
            ..Default::default()
        };
        let err = p.validate().unwrap_err();
        assert!(matches!(err, Error::InvalidParams { field: "p_d", .. }));
    }

    #[test]
    fn non_pd_measurement_covariance_rejected() {
        let p = ModelParams {
            meas_cov: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]),
            ..Default::default()
        };
        let err = p.validate().unwrap_err();
        assert!(matches!(err, Error::InvalidParams { field: "meas_cov", .. }));
    }

    #[test]
    fn asymmetric_covariance_rejected() {
        let p = ModelParams {
            meas_cov: DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.0, 1.0]),
            ..Default::default()
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn thresholds_outside_unit_interval_rejected() {
        let p = ModelParams {
            t_new: 1.5,
            ..Default::default()
        };
        assert!(matches!(
            p.validate().unwrap_err(),
            Error::InvalidParams { field: "t_new", .. }
        ));
    }

    #[test]
    fn json_is_flat_and_round_trips() {
        let p = ModelParams::default();
        let json = p.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        for key in [
            "p_d", "p_s", "mu_fa", "mu_u", "roi", "meas_matrix", "meas_cov", "proc_cov", "dt",
            "t_dec", "t_pru", "t_new", "n_particles", "L_da", "da_tol",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["meas_matrix"][1][1], 1.0);
        let back = ModelParams::from_json(&json).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn observation_picks_position() {
        let h = ModelParams::default().observation();
        let x = KinematicState::new(1.0, 2.0, 3.0, 4.0).to_vector();
        assert_eq!(h * x, nalgebra::Vector2::new(1.0, 2.0));
    }

    #[test]
    fn proc_noise_factor_reproduces_covariance() {
        let p = ModelParams::default();
        let l = p.proc_noise_factor();
        let q = Matrix4::from_iterator(p.proc_cov.iter().copied());
        assert!((l * l.transpose() - q).abs().max() < 1e-12);
    }

    #[test]
    fn potential_object_checks_weights_and_existence() {
        let s = KinematicState::default();
        assert!(PotentialObject::new(vec![s, s], vec![0.5, 0.5], 0.3, 1, PoKind::Legacy).is_ok());
        assert!(PotentialObject::new(vec![s, s], vec![0.5, 0.6], 0.3, 1, PoKind::Legacy).is_err());
        assert!(PotentialObject::new(vec![s], vec![1.0], 1.2, 1, PoKind::Legacy).is_err());
        assert!(PotentialObject::new(vec![], vec![], 0.3, 1, PoKind::Legacy).is_err());
    }

    #[test]
    fn mean_of_two_particles() {
        let po = PotentialObject::uniform(
            vec![
                KinematicState::new(0.0, 0.0, 0.0, 0.0),
                KinematicState::new(2.0, 0.0, 0.0, 0.0),
            ],
            0.9,
            7,
            PoKind::Legacy,
        )
        .unwrap();
        assert_eq!(po.mean(), KinematicState::new(1.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn inconsistent_association_rejected() {
        assert!(AssociationVector::from_object_oriented(vec![1, 1], 2).is_err());
        assert!(AssociationVector::from_object_oriented(vec![3], 2).is_err());
    }

    /// Random valid object-oriented vector: an injective partial map from
    /// objects to 1-based measurement indices.
    fn object_oriented() -> impl Strategy<Value = (Vec<usize>, usize)> {
        (0usize..6, 0usize..6).prop_flat_map(|(n_obj, n_meas)| {
            let perm = Just((1..=n_meas).collect::<Vec<_>>()).prop_shuffle();
            let mask = proptest::collection::vec(any::<bool>(), n_obj);
            (perm, mask).prop_map(move |(perm, mask)| {
                let a = mask
                    .iter()
                    .enumerate()
                    .map(|(i, &on)| if on && i < perm.len() { perm[i] } else { 0 })
                    .collect();
                (a, n_meas)
            })
        })
    }

    proptest! {
        #[test]
        fn valid_a_gives_unique_consistent_b((a, n_meas) in object_oriented()) {
            let n_obj = a.len();
            let assoc = AssociationVector::from_object_oriented(a.clone(), n_meas).unwrap();
            prop_assert!(assoc.is_consistent());
            let back = AssociationVector::from_measurement_oriented(assoc.b.clone(), n_obj).unwrap();
            prop_assert_eq!(&back.a, &a);
            // any other b paired with the same a violates some indicator
            for j in 0..n_meas {
                for alt in 0..=n_obj {
                    if alt == assoc.b[j] {
                        continue;
                    }
                    let mut b = assoc.b.clone();
                    b[j] = alt;
                    let other = AssociationVector { a: assoc.a.clone(), b };
                    prop_assert!(!other.is_consistent());
                }
            }
        }
    }
}
