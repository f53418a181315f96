//! Prediction and the single-object likelihood ratios feeding association.

use nalgebra::{DMatrix, Matrix2, Vector2, Vector4};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::model::{Measurement, MeasurementFrame, ModelParams, PoKind, PotentialObject};

/// Floor applied to gated-in likelihood ratios so that underflow never
/// turns a possible association into an impossible one.
pub const BETA_FLOOR: f64 = 1e-300;

/// Propagates every particle through the constant-velocity model and
/// discounts existence by the survival probability. Weights are unchanged.
pub fn predict<R: Rng + ?Sized>(
    po: &PotentialObject,
    params: &ModelParams,
    rng: &mut R,
) -> PotentialObject {
    let f = params.transition();
    let g = params.proc_noise_factor();
    let particles = po
        .particles
        .iter()
        .map(|p| {
            let n = Vector4::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
            let x = f * p.to_vector() + g * n;
            crate::model::KinematicState::from_vector(&x)
        })
        .collect();
    PotentialObject {
        particles,
        weights: po.weights.clone(),
        existence: po.existence * params.p_s,
        track_id: po.track_id,
        kind: PoKind::Legacy,
        shape: po.shape.clone(),
        score_evidence: po.score_evidence,
    }
}

/// Bivariate normal density `N(z; m, R)` with a precomputed inverse.
#[derive(Debug, Clone, Copy)]
pub struct Gaussian2 {
    inv: Matrix2<f64>,
    log_norm: f64,
}

impl Gaussian2 {
    pub fn new(cov: &Matrix2<f64>) -> Option<Self> {
        let det = cov.determinant();
        if !(det > 0.0) {
            return None;
        }
        Some(Gaussian2 {
            inv: cov.try_inverse()?,
            log_norm: -(std::f64::consts::TAU).ln() - 0.5 * det.ln(),
        })
    }

    pub fn mahalanobis2(&self, d: &Vector2<f64>) -> f64 {
        (d.transpose() * self.inv * d)[(0, 0)]
    }

    pub fn pdf(&self, d: &Vector2<f64>) -> f64 {
        (self.log_norm - 0.5 * self.mahalanobis2(d)).exp()
    }
}

/// Per-particle measurement likelihoods `f(z_j | x_p)` of one object, for
/// the gated-in measurements only.
pub type ParticleLikelihoods = Vec<(usize, Vec<f64>)>;

#[derive(Debug, Clone)]
pub struct BetaEval {
    /// `I x (J + 1)`, column 0 is `beta_i(0)`.
    pub beta: DMatrix<f64>,
    pub likelihoods: Vec<ParticleLikelihoods>,
}

fn gated(po: &PotentialObject, params: &ModelParams, frame: &MeasurementFrame) -> Vec<bool> {
    let Some(gate) = params.gate else {
        return vec![true; frame.len()];
    };
    let h = params.observation();
    let mean = h * po.mean().to_vector();
    let s = h * po.covariance() * h.transpose() + params.meas_cov2();
    match Gaussian2::new(&s) {
        Some(g) => frame
            .measurements
            .iter()
            .map(|m| g.mahalanobis2(&(Vector2::new(m.px, m.py) - mean)) <= gate)
            .collect(),
        None => vec![true; frame.len()],
    }
}

fn object_row(
    po: &PotentialObject,
    frame: &MeasurementFrame,
    params: &ModelParams,
    lik: &Gaussian2,
) -> (Vec<f64>, ParticleLikelihoods) {
    let h = params.observation();
    let lambda = params.clutter_intensity();
    let r = po.existence;
    let mut row = vec![0.0; frame.len() + 1];
    row[0] = 1.0 - r * params.p_d;
    let mut per_particle = Vec::new();
    if r <= 0.0 {
        return (row, per_particle);
    }
    let predicted: Vec<Vector2<f64>> = po.particles.iter().map(|p| h * p.to_vector()).collect();
    for (j, ok) in gated(po, params, frame).into_iter().enumerate() {
        if !ok {
            continue;
        }
        let z = meas_position(&frame.measurements[j]);
        let values: Vec<f64> = predicted.iter().map(|hx| lik.pdf(&(z - hx))).collect();
        let integral: f64 = values.iter().zip(&po.weights).map(|(l, w)| l * w).sum();
        row[j + 1] = (r * params.p_d * integral / lambda).max(BETA_FLOOR);
        per_particle.push((j, values));
    }
    (row, per_particle)
}

fn meas_position(m: &Measurement) -> Vector2<f64> {
    Vector2::new(m.px, m.py)
}

/// Likelihood ratios of every predicted object against every measurement.
/// Rows are evaluated in parallel; each row is a pure function of its
/// object, so the result does not depend on the schedule.
pub fn compute_beta(
    pred: &[PotentialObject],
    frame: &MeasurementFrame,
    params: &ModelParams,
) -> BetaEval {
    let lik = Gaussian2::new(&params.meas_cov2()).expect("measurement covariance is validated PD");
    let rows: Vec<(Vec<f64>, ParticleLikelihoods)> = pred
        .par_iter()
        .map(|po| object_row(po, frame, params, &lik))
        .collect();
    let mut beta = DMatrix::zeros(pred.len(), frame.len() + 1);
    let mut likelihoods = Vec::with_capacity(pred.len());
    for (i, (row, l)) in rows.into_iter().enumerate() {
        for (j, v) in row.into_iter().enumerate() {
            beta[(i, j)] = v;
        }
        likelihoods.push(l);
    }
    BetaEval { beta, likelihoods }
}

fn normal_cdf(t: f64) -> f64 {
    0.5 * libm::erfc(-t / std::f64::consts::SQRT_2)
}

/// Probability mass of `N(z, R)` inside the region of interest.
pub fn roi_mass(z: [f64; 2], params: &ModelParams) -> f64 {
    let r = params.meas_cov2();
    let roi = &params.roi;
    let (sx, sy) = (r[(0, 0)].sqrt(), r[(1, 1)].sqrt());
    let mx = normal_cdf((roi.x_max - z[0]) / sx) - normal_cdf((roi.x_min - z[0]) / sx);
    let my = normal_cdf((roi.y_max - z[1]) / sy) - normal_cdf((roi.y_min - z[1]) / sy);
    mx * my
}

/// `xi_j(0)` per measurement: one for the false-alarm branch plus the
/// new-object likelihood ratio under a uniform birth density.
pub fn compute_xi(frame: &MeasurementFrame, params: &ModelParams) -> Vec<f64> {
    // f_u = f_FA = 1/A, so the ratio reduces to the ROI mass of the
    // measurement likelihood.
    frame
        .measurements
        .iter()
        .map(|m| 1.0 + params.p_d * params.mu_u * roi_mass(m.position(), params) / params.mu_fa)
        .collect()
}

/// `C_q` per object: the sum of its likelihood-ratio row.
pub fn legacy_normalizers(beta: &DMatrix<f64>) -> Vec<f64> {
    (0..beta.nrows()).map(|i| beta.row(i).sum()).collect()
}

/// `C_v` per measurement: `xi_j(0)` plus one unit per legacy object.
pub fn new_normalizers(xi: &[f64], n_objects: usize) -> Vec<f64> {
    xi.iter().map(|x| x + n_objects as f64).collect()
}
