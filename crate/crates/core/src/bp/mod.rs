//! Particle-based belief propagation for multiobject tracking.

pub mod da;
pub mod factors;
pub mod update;

use std::io::Write;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use da::{
    association_marginals, enumerate_marginals, fixed_point_residual, iterate_da, max_row_tv, DaInputs,
    DaMessages,
};
pub use factors::{compute_beta, compute_xi, legacy_normalizers, new_normalizers, predict, BetaEval};
pub use update::{
    compute_beliefs, da_inputs, declare_and_estimate, prune, survives, BeliefUpdate, Enhancement, Estimate,
};

use crate::error::{Error, Result};
use crate::model::{MeasurementFrame, ModelParams, PotentialObject, TrackId};

/// Everything a tracker carries from one frame to the next, including its
/// random stream, so a snapshot resumes bit-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackerState {
    pub objects: Vec<PotentialObject>,
    pub next_id: TrackId,
    pub frame: usize,
    pub rng: ChaCha8Rng,
}

impl TrackerState {
    pub fn new(seed: u64) -> Self {
        TrackerState {
            objects: Vec::new(),
            next_id: 1,
            frame: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Output of one tracking step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub estimates: Vec<Estimate>,
    pub p_a: DMatrix<f64>,
    pub p_b: DMatrix<f64>,
    pub da_iterations: usize,
    pub converged: bool,
    /// Track ids given to new objects this frame, with the index of the
    /// measurement (within the ROI-restricted frame) that introduced each.
    pub new_origins: Vec<(TrackId, usize)>,
}

/// The part of a step shared by the plain and the enhanced tracker:
/// prediction, likelihood ratios and the model-based association.
#[derive(Debug, Clone)]
pub struct FramePrep {
    pub frame: MeasurementFrame,
    pub pred: Vec<PotentialObject>,
    pub eval: BetaEval,
    pub xi: Vec<f64>,
    pub inputs: DaInputs,
    pub msgs: DaMessages,
}

pub fn prepare(
    state: &mut TrackerState,
    frame: &MeasurementFrame,
    params: &ModelParams,
) -> Result<FramePrep> {
    for m in &frame.measurements {
        m.validate(None)?;
    }
    let frame = frame.restricted_to(&params.roi);
    let pred: Vec<PotentialObject> = state
        .objects
        .iter()
        .map(|po| predict(po, params, &mut state.rng))
        .collect();
    let eval = compute_beta(&pred, &frame, params);
    let xi = compute_xi(&frame, params);
    let inputs = da_inputs(&eval.beta, &xi, &Enhancement::identity(pred.len(), frame.len()));
    inputs.validate()?;
    let msgs = iterate_da(&inputs, params.l_da, params.da_tol);
    Ok(FramePrep {
        frame,
        pred,
        eval,
        xi,
        inputs,
        msgs,
    })
}

/// Belief calculation, pruning and estimation from (possibly enhanced)
/// association inputs and their converged messages.
pub fn finish(
    state: &mut TrackerState,
    prep: &FramePrep,
    enh: &Enhancement,
    inputs: &DaInputs,
    msgs: &DaMessages,
    params: &ModelParams,
) -> Result<StepOutput> {
    let up = compute_beliefs(
        &prep.pred,
        &prep.frame,
        &prep.eval,
        &prep.xi,
        inputs,
        msgs,
        enh,
        params,
        &mut state.rng,
    );
    let mut objects = prune(up.legacy, params);
    let mut new_origins = Vec::new();
    for (j, mut po) in up.new.into_iter().enumerate() {
        if !survives(&po, params) {
            continue;
        }
        po.track_id = state.next_id;
        new_origins.push((state.next_id, j));
        state.next_id += 1;
        objects.push(po);
    }
    if let Some(bad) = objects.iter().find(|po| !po.existence.is_finite()) {
        return Err(Error::NonFinite(format!("existence of track {}", bad.track_id)));
    }
    state.objects = objects;
    state.frame += 1;
    Ok(StepOutput {
        estimates: declare_and_estimate(&state.objects, params),
        p_a: up.p_a,
        p_b: up.p_b,
        da_iterations: msgs.iterations_used,
        converged: msgs.converged,
        new_origins,
    })
}

/// One frame of the model-based tracker.
pub fn bp_step(
    state: &mut TrackerState,
    frame: &MeasurementFrame,
    params: &ModelParams,
) -> Result<StepOutput> {
    let prep = prepare(state, frame, params)?;
    let enh = Enhancement::identity(prep.pred.len(), prep.frame.len());
    finish(state, &prep, &enh, &prep.inputs, &prep.msgs, params)
}

/// Writes `frame, track_id, px, py, vx, vy, existence, score` rows.
pub fn write_estimates_csv<W: Write>(out: W, frames: &[Vec<Estimate>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["frame", "track_id", "px", "py", "vx", "vy", "existence", "score"])?;
    for (k, ests) in frames.iter().enumerate() {
        for e in ests {
            w.write_record([
                k.to_string(),
                e.track_id.to_string(),
                e.state.px.to_string(),
                e.state.py.to_string(),
                e.state.vx.to_string(),
                e.state.vy.to_string(),
                e.existence.to_string(),
                e.score.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads the format written by [`write_estimates_csv`].
pub fn read_estimates_csv<R: std::io::Read>(input: R) -> Result<Vec<Vec<Estimate>>> {
    #[derive(Deserialize)]
    struct Row {
        frame: usize,
        track_id: TrackId,
        px: f64,
        py: f64,
        vx: f64,
        vy: f64,
        existence: f64,
        score: f64,
    }
    let mut frames: Vec<Vec<Estimate>> = Vec::new();
    for row in csv::Reader::from_reader(input).deserialize() {
        let r: Row = row?;
        if frames.len() <= r.frame {
            frames.resize(r.frame + 1, Vec::new());
        }
        frames[r.frame].push(Estimate {
            track_id: r.track_id,
            state: crate::model::KinematicState::new(r.px, r.py, r.vx, r.vy),
            existence: r.existence,
            score: r.score,
        });
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{KinematicState, Measurement};

    #[test]
    fn empty_in_empty_out() {
        let mut st = TrackerState::new(0);
        let out = bp_step(&mut st, &MeasurementFrame::default(), &ModelParams::default()).unwrap();
        assert!(out.estimates.is_empty());
        assert!(st.objects.is_empty());
        assert_eq!(st.frame, 1);
    }

    fn track_single(seed: u64) -> (TrackerState, Vec<StepOutput>) {
        let params = ModelParams {
            p_d: 1.0,
            n_particles: 200,
            ..Default::default()
        };
        let mut st = TrackerState::new(seed);
        let mut outs = Vec::new();
        for k in 0..10 {
            let x = KinematicState::new(k as f64 * 0.5, 2.0, 1.0, 0.0);
            let frame = MeasurementFrame::new(vec![Measurement {
                px: x.px,
                py: x.py,
                vx: x.vx,
                vy: x.vy,
                score: 0.9,
                shape: Vec::new(),
            }]);
            outs.push(bp_step(&mut st, &frame, &params).unwrap());
        }
        (st, outs)
    }

    #[test]
    fn unambiguous_single_object_is_confirmed() {
        let (st, outs) = track_single(5);
        let declared: Vec<_> = st.objects.iter().filter(|po| po.existence > 0.5).collect();
        assert_eq!(declared.len(), 1);
        assert!(declared[0].existence > 0.999);
        let last = outs.last().unwrap();
        assert_eq!(last.estimates.len(), 1);
        assert!((last.estimates[0].state.px - 4.5).abs() < 0.5);
        assert!(outs.iter().all(|o| o.converged));
    }

    #[test]
    fn same_seed_same_state() {
        assert_eq!(track_single(9).0, track_single(9).0);
    }

    #[test]
    fn snapshot_resumes_identically() {
        let (st, _) = track_single(2);
        let mut a = st.clone();
        let mut b = TrackerState::from_json(&st.to_json().unwrap()).unwrap();
        assert_eq!(a, b);
        let frame = MeasurementFrame::new(vec![Measurement {
            px: 5.0,
            py: 2.0,
            vx: 1.0,
            vy: 0.0,
            score: 0.9,
            shape: Vec::new(),
        }]);
        let params = ModelParams::default();
        bp_step(&mut a, &frame, &params).unwrap();
        bp_step(&mut b, &frame, &params).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn estimates_csv_round_trip() {
        let (_, outs) = track_single(1);
        let frames: Vec<Vec<Estimate>> = outs.into_iter().map(|o| o.estimates).collect();
        let mut buf = Vec::new();
        write_estimates_csv(&mut buf, &frames).unwrap();
        let back = read_estimates_csv(buf.as_slice()).unwrap();
        assert_eq!(back.len(), frames.len());
        assert_eq!(back[9], frames[9]);
    }

    #[test]
    fn non_finite_measurement_is_an_error() {
        let mut st = TrackerState::new(0);
        let frame = MeasurementFrame::new(vec![Measurement {
            px: f64::NAN,
            py: 0.0,
            vx: 0.0,
            vy: 0.0,
            score: 0.5,
            shape: Vec::new(),
        }]);
        assert!(bp_step(&mut st, &frame, &ModelParams::default()).is_err());
    }
}
