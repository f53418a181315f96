//! Neural enhancement of the association step: a GNN refines the
//! likelihood ratios with learned false-alarm rejection and shape
//! association terms before the association is rerun.

pub mod gnn;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use gnn::{
    backward, compute_refinements, extract_features, forward, gnn_inputs, gnn_pass, logit,
    sigmoid, Forward, GnnInputs, GnnState, NebpNets, NetConfig, Refinements,
};

use crate::bp::{
    bp_step, da_inputs, finish, iterate_da, legacy_normalizers, prepare, DaInputs, Enhancement,
    FramePrep, StepOutput, TrackerState,
};
use crate::error::{Error, Result};
use crate::model::{MeasurementFrame, ModelParams};
use crate::nn::Adam;

/// Tracker variants. The ablations switch parts of the enhancement off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Bp,
    Nebp,
    /// Motion features only.
    NebpM,
    /// False-alarm rejection only.
    NebpR,
    /// Shape association only.
    NebpA,
    /// Uncalibrated sigmoid.
    NebpNc,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Bp,
        Method::Nebp,
        Method::NebpM,
        Method::NebpR,
        Method::NebpA,
        Method::NebpNc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Bp => "bp",
            Method::Nebp => "nebp",
            Method::NebpM => "nebp-m",
            Method::NebpR => "nebp-r",
            Method::NebpA => "nebp-a",
            Method::NebpNc => "nebp-nc",
        }
    }

    pub fn uses_nets(self) -> bool {
        self != Method::Bp
    }

    pub fn uses_shape(self) -> bool {
        self != Method::NebpM
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidParams {
                field: "method",
                reason: format!("unknown method `{s}`"),
            })
    }
}

/// Sigmoid temperature and bias applied to the rejection head at inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    #[serde(with = "extended_f64")]
    pub temperature: f64,
    pub delta: f64,
}

impl Default for Calibration {
    fn default() -> Self {
        Calibration {
            temperature: 1.0,
            delta: 0.0,
        }
    }
}

impl Calibration {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::param("temperature", "must be positive"));
        }
        if !self.delta.is_finite() {
            return Err(Error::param("delta", "must be finite"));
        }
        Ok(())
    }
}

/// Per-class calibrations; unknown classes fall back to `default`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub classes: BTreeMap<String, Calibration>,
}

impl CalibrationFile {
    pub fn single(class: &str, c: Calibration) -> Self {
        CalibrationFile {
            classes: BTreeMap::from([(class.to_string(), c)]),
        }
    }

    pub fn get(&self, class: &str) -> Calibration {
        self.classes
            .get(class)
            .or_else(|| self.classes.get("default"))
            .copied()
            .unwrap_or_default()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: CalibrationFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        for cal in c.classes.values() {
            cal.validate()?;
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Infinity is not valid JSON; it is written as the string `"inf"`.
mod extended_f64 {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) => Err(de::Error::custom(format!("expected a number or \"inf\", got {s:?}"))),
        }
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Networks plus optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub nets: NebpNets,
    pub adam: Option<Adam>,
    pub epochs_done: usize,
}

impl Checkpoint {
    pub fn new(nets: NebpNets) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            nets,
            adam: None,
            epochs_done: 0,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(s)?;
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", c.version)));
        }
        c.nets.validate()?;
        if let Some(a) = &c.adam {
            if a.m.len() != c.nets.n_params() || a.v.len() != c.nets.n_params() {
                return Err(Error::Checkpoint("optimizer state does not match networks".into()));
            }
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// The model-based part of a frame together with the GNN pass over it.
#[derive(Debug, Clone)]
pub struct NebpFrame {
    pub prep: FramePrep,
    pub inputs: GnnInputs,
    pub forward: Forward,
    pub c_q: Vec<f64>,
}

/// Prediction, model-based association and the GNN forward pass.
pub fn nebp_forward(
    state: &mut TrackerState,
    frame: &MeasurementFrame,
    params: &ModelParams,
    nets: &NebpNets,
    use_shape: bool,
) -> Result<NebpFrame> {
    let previous = state.objects.clone();
    let prep = prepare(state, frame, params)?;
    let inputs = gnn_inputs(
        &previous,
        &prep.frame,
        &prep.eval.beta,
        &prep.xi,
        &prep.msgs.phi,
        &prep.msgs.nu,
        &params.roi,
        &nets.config,
        use_shape,
    );
    let fwd = forward(nets, &inputs);
    if let Some(bad) = fwd.omega_star.iter().chain(fwd.mu_star.iter()).find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("refinement head output {bad}")));
    }
    Ok(NebpFrame {
        c_q: legacy_normalizers(&prep.eval.beta),
        prep,
        inputs,
        forward: fwd,
    })
}

/// Refinements for a method, with the ablations applied.
pub fn method_refinements(method: Method, fwd: &Forward, cal: Calibration) -> Refinements {
    let cal = if method == Method::NebpNc {
        Calibration::default()
    } else {
        cal
    };
    let mut r = compute_refinements(&fwd.omega_star, &fwd.mu_star, cal.temperature, cal.delta);
    match method {
        Method::NebpR => r.mu.fill(0.0),
        Method::NebpA => r.omega.fill(1.0),
        Method::Bp => {
            r.mu.fill(0.0);
            r.omega.fill(1.0);
        }
        _ => {}
    }
    r
}

/// Enhanced association inputs: every row scaled by `1/C_q`, measurement
/// likelihood ratios weighted by `omega` and shifted by `mu`, new-object
/// ratios pulled toward the false-alarm value by `omega`.
pub fn enhance(
    beta: &DMatrix<f64>,
    xi: &[f64],
    c_q: &[f64],
    r: &Refinements,
) -> (DaInputs, Enhancement) {
    let enh = Enhancement {
        omega: r.omega.clone(),
        mu: r.mu.clone(),
        scale: c_q.iter().map(|c| if *c > 0.0 { 1.0 / c } else { 1.0 }).collect(),
    };
    (da_inputs(beta, xi, &enh), enh)
}

/// Enhanced association and belief update for a frame already run through
/// [`nebp_forward`].
pub fn nebp_complete(
    state: &mut TrackerState,
    nf: &NebpFrame,
    r: &Refinements,
    params: &ModelParams,
) -> Result<StepOutput> {
    let (inputs, enh) = enhance(&nf.prep.eval.beta, &nf.prep.xi, &nf.c_q, r);
    inputs.validate()?;
    let msgs = iterate_da(&inputs, params.l_da, params.da_tol);
    finish(state, &nf.prep, &enh, &inputs, &msgs, params)
}

/// One frame of the selected tracker.
pub fn nebp_step(
    state: &mut TrackerState,
    frame: &MeasurementFrame,
    params: &ModelParams,
    nets: Option<&NebpNets>,
    method: Method,
    cal: Calibration,
) -> Result<StepOutput> {
    if method == Method::Bp {
        return bp_step(state, frame, params);
    }
    let nets = nets.ok_or_else(|| Error::Checkpoint(format!("method {method} needs networks")))?;
    let nf = nebp_forward(state, frame, params, nets, method.uses_shape())?;
    let r = method_refinements(method, &nf.forward, cal);
    nebp_complete(state, &nf, &r, params)
}
