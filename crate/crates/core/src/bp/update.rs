//! Belief calculation, pruning, and declaration/estimation.

use nalgebra::{DMatrix, Vector2, Vector4};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::da::{association_marginals, DaInputs, DaMessages};
use super::factors::BetaEval;
use crate::model::{
    KinematicState, MeasurementFrame, ModelParams, PoKind, PotentialObject, TrackId,
};

/// Learned corrections applied to the association factors. The identity
/// (`omega = 1`, `mu = 0`, `scale = 1`) yields plain belief propagation.
#[derive(Debug, Clone, PartialEq)]
pub struct Enhancement {
    /// Per-measurement false-alarm rejection weight.
    pub omega: Vec<f64>,
    /// `I x J` shape-association terms.
    pub mu: DMatrix<f64>,
    /// Per-object factor normalization `1 / C_q`.
    pub scale: Vec<f64>,
}

impl Enhancement {
    pub fn identity(n_objects: usize, n_meas: usize) -> Self {
        Enhancement {
            omega: vec![1.0; n_meas],
            mu: DMatrix::zeros(n_objects, n_meas),
            scale: vec![1.0; n_objects],
        }
    }
}

/// Association inputs after applying `enh` to the raw ratios.
///
/// `beta~(0) = s beta(0)`, `beta~(j) = omega_j s beta(j) + mu(j)` and the
/// measurement ratio becomes `1 + omega_j (xi_j(0) - 1)`: only the
/// new-object part of the `b_j = 0` branch is reweighted.
pub fn da_inputs(beta: &DMatrix<f64>, xi: &[f64], enh: &Enhancement) -> DaInputs {
    let (n_obj, n_meas) = (beta.nrows(), xi.len());
    let mut b = DMatrix::zeros(n_obj, n_meas + 1);
    for i in 0..n_obj {
        let s = enh.scale[i];
        b[(i, 0)] = s * beta[(i, 0)];
        for j in 0..n_meas {
            b[(i, j + 1)] = enh.omega[j] * s * beta[(i, j + 1)] + enh.mu[(i, j)];
        }
    }
    let xi = xi
        .iter()
        .zip(&enh.omega)
        .map(|(x, w)| 1.0 + w * (x - 1.0))
        .collect();
    DaInputs { beta: b, xi }
}

#[derive(Debug, Clone)]
pub struct BeliefUpdate {
    pub legacy: Vec<PotentialObject>,
    pub new: Vec<PotentialObject>,
    /// `I x (J + 1)` marginals `p(a_i = 0..=J)`.
    pub p_a: DMatrix<f64>,
    /// `J x (I + 1)` marginals `p(b_j = 0..=I)`.
    pub p_b: DMatrix<f64>,
}

const SHAPE_RATE: f64 = 0.1;

/// Updated legacy and new object beliefs from converged association
/// messages. `xi` holds the raw (unenhanced) `xi_j(0)`.
#[allow(clippy::too_many_arguments)]
pub fn compute_beliefs<R: Rng + ?Sized>(
    pred: &[PotentialObject],
    frame: &MeasurementFrame,
    eval: &BetaEval,
    xi: &[f64],
    inputs: &DaInputs,
    msgs: &DaMessages,
    enh: &Enhancement,
    params: &ModelParams,
    rng: &mut R,
) -> BeliefUpdate {
    let (p_a, p_b) = association_marginals(inputs, msgs);
    let lambda = params.clutter_intensity();
    let n_meas = frame.len();

    let mut legacy = Vec::with_capacity(pred.len());
    for (i, po) in pred.iter().enumerate() {
        let r = po.existence;
        let s = enh.scale[i];
        let base = s * r * (1.0 - params.p_d);
        let shape_term: f64 = (0..n_meas).map(|j| msgs.nu[(i, j)] * enh.mu[(i, j)]).sum();
        let mut factor = vec![base + shape_term; po.particles.len()];
        for (j, values) in &eval.likelihoods[i] {
            let c = msgs.nu[(i, *j)] * enh.omega[*j] * s * r * params.p_d / lambda;
            for (f, l) in factor.iter_mut().zip(values) {
                *f += c * l;
            }
        }
        let weights: Vec<f64> = po.weights.iter().zip(&factor).map(|(w, f)| w * f).collect();
        let num: f64 = weights.iter().sum();
        let mut out = po.clone();
        if num > 0.0 && num.is_finite() {
            out.existence = (num / (num + s * (1.0 - r))).clamp(0.0, 1.0);
            out.weights = weights;
            out.normalize_weights();
        } else {
            out.existence = 0.0;
        }
        out.score_evidence = (0..n_meas)
            .map(|j| p_a[(i, j + 1)] * frame.measurements[j].score)
            .sum();
        update_shape(&mut out.shape, frame, &p_a, i);
        resample_if_degenerate(&mut out, rng);
        legacy.push(out);
    }

    let n_obj = pred.len();
    let mut new = Vec::with_capacity(n_meas);
    for (j, m) in frame.measurements.iter().enumerate() {
        let phi_sum: f64 = (0..n_obj).map(|i| msgs.phi[(i, j)]).sum();
        let ratio = inputs.xi[j];
        let born = enh.omega[j] * (xi[j] - 1.0);
        let denom = ratio + phi_sum;
        let (existence, p_unassociated) = if denom > 0.0 {
            ((born / denom).clamp(0.0, 1.0), (ratio / denom).clamp(0.0, 1.0))
        } else {
            (0.0, 0.0)
        };
        let particles = birth_particles(m.position(), [m.vx, m.vy], params, rng);
        let n = particles.len() as f64;
        new.push(PotentialObject {
            weights: vec![1.0 / n; particles.len()],
            particles,
            existence,
            track_id: 0,
            kind: PoKind::New { p_unassociated },
            shape: m.shape.clone(),
            score_evidence: m.score,
        });
    }

    BeliefUpdate {
        legacy,
        new,
        p_a,
        p_b,
    }
}

fn update_shape(shape: &mut Vec<f64>, frame: &MeasurementFrame, p_a: &DMatrix<f64>, i: usize) {
    for (j, m) in frame.measurements.iter().enumerate() {
        if m.shape.len() != shape.len() {
            continue;
        }
        let w = SHAPE_RATE * p_a[(i, j + 1)];
        for (d, s) in shape.iter_mut().zip(&m.shape) {
            *d += w * (s - *d);
        }
    }
}

fn birth_particles<R: Rng + ?Sized>(
    z: [f64; 2],
    v: [f64; 2],
    params: &ModelParams,
    rng: &mut R,
) -> Vec<KinematicState> {
    let r = params.meas_cov2();
    let l = r.cholesky().map(|c| c.l()).unwrap_or_else(|| r.map(f64::sqrt));
    (0..params.n_particles)
        .map(|_| {
            let e = l * Vector2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
            let vx = v[0] + params.birth_vel_std * rng.sample::<f64, _>(StandardNormal);
            let vy = v[1] + params.birth_vel_std * rng.sample::<f64, _>(StandardNormal);
            KinematicState::from_vector(&Vector4::new(z[0] + e[0], z[1] + e[1], vx, vy))
        })
        .collect()
}

/// Systematic resampling when the effective sample size drops below half
/// the particle count.
pub fn resample_if_degenerate<R: Rng + ?Sized>(po: &mut PotentialObject, rng: &mut R) {
    let n = po.particles.len();
    if n == 0 || po.effective_sample_size() >= n as f64 / 2.0 {
        return;
    }
    let u0: f64 = rng.random::<f64>() / n as f64;
    let mut out = Vec::with_capacity(n);
    let mut cum = po.weights[0];
    let mut k = 0;
    for m in 0..n {
        let u = u0 + m as f64 / n as f64;
        while u > cum && k + 1 < n {
            k += 1;
            cum += po.weights[k];
        }
        out.push(po.particles[k]);
    }
    po.particles = out;
    po.weights = vec![1.0 / n as f64; n];
}

/// Drops objects that almost surely do not exist, and new objects whose
/// measurement is likely explained by a legacy object.
pub fn prune(pos: Vec<PotentialObject>, params: &ModelParams) -> Vec<PotentialObject> {
    pos.into_iter().filter(|po| survives(po, params)).collect()
}

pub fn survives(po: &PotentialObject, params: &ModelParams) -> bool {
    po.existence >= params.t_pru
        && match po.kind {
            PoKind::New { p_unassociated } => p_unassociated >= params.t_new,
            PoKind::Legacy => true,
        }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub track_id: TrackId,
    pub state: KinematicState,
    pub existence: f64,
    /// Existence probability plus the associated detector score.
    pub score: f64,
}

/// MMSE estimates of every object whose existence exceeds `t_dec`.
pub fn declare_and_estimate(pos: &[PotentialObject], params: &ModelParams) -> Vec<Estimate> {
    pos.iter()
        .filter(|po| po.existence > params.t_dec)
        .map(|po| Estimate {
            track_id: po.track_id,
            state: po.mean(),
            existence: po.existence,
            score: po.existence + po.score_evidence,
        })
        .collect()
}
