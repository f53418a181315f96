//! Bipartite GNN over legacy objects and measurements, its refinement heads
//! and the reverse pass used for training.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MeasurementFrame, PotentialObject, Roi};
use crate::nn::{Mlp, Tape};

/// Length of the motion network input.
pub const MOTION_INPUT: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Length of each of the motion and shape features.
    pub d_emb: usize,
    pub hidden: usize,
    pub gnn_iters: usize,
    pub shape_dim: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            d_emb: 128,
            hidden: 128,
            gnn_iters: 3,
            shape_dim: 8,
        }
    }
}

impl NetConfig {
    pub fn embedding_dim(&self) -> usize {
        2 * self.d_emb
    }

    fn sizes(&self) -> [[usize; 3]; 6] {
        let (d, h, e) = (self.d_emb, self.hidden, self.embedding_dim());
        [
            [MOTION_INPUT, h, d],
            [self.shape_dim, h, d],
            [2 * e + 2, h, e],
            [2 * e + 1, h, e],
            [e, h, 1],
            [e, h, 1],
        ]
    }
}

/// Every network of the enhancement layer. The motion and shape networks
/// are shared between legacy objects and measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NebpNets {
    pub config: NetConfig,
    pub motion: Mlp,
    pub shape: Mlp,
    pub edge: Mlp,
    pub node: Mlp,
    pub rejection: Mlp,
    pub association: Mlp,
}

impl NebpNets {
    pub fn new<R: Rng + ?Sized>(config: NetConfig, rng: &mut R) -> Self {
        let s = config.sizes();
        NebpNets {
            config,
            motion: Mlp::new(&s[0], rng),
            shape: Mlp::new(&s[1], rng),
            edge: Mlp::new(&s[2], rng),
            node: Mlp::new(&s[3], rng),
            rejection: Mlp::new(&s[4], rng),
            association: Mlp::new(&s[5], rng),
        }
    }

    pub fn zeros(config: NetConfig) -> Self {
        let s = config.sizes();
        NebpNets {
            config,
            motion: Mlp::zeros(&s[0]),
            shape: Mlp::zeros(&s[1]),
            edge: Mlp::zeros(&s[2]),
            node: Mlp::zeros(&s[3]),
            rejection: Mlp::zeros(&s[4]),
            association: Mlp::zeros(&s[5]),
        }
    }

    pub fn nets(&self) -> [&Mlp; 6] {
        [
            &self.motion,
            &self.shape,
            &self.edge,
            &self.node,
            &self.rejection,
            &self.association,
        ]
    }

    fn nets_mut(&mut self) -> [&mut Mlp; 6] {
        [
            &mut self.motion,
            &mut self.shape,
            &mut self.edge,
            &mut self.node,
            &mut self.rejection,
            &mut self.association,
        ]
    }

    fn offsets(&self) -> [usize; 7] {
        let mut out = [0; 7];
        for (k, n) in self.nets().iter().enumerate() {
            out[k + 1] = out[k] + n.n_params();
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.offsets()[6]
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for n in self.nets() {
            n.write_params(&mut out);
        }
        out
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::Shape {
                expected: self.n_params(),
                actual: p.len(),
            });
        }
        let mut k = 0;
        for n in self.nets_mut() {
            k += n.read_params(&p[k..]);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for (n, want) in self.nets().iter().zip(self.config.sizes()) {
            n.validate()?;
            let dims: Vec<usize> = std::iter::once(n.input_dim())
                .chain(n.layers.iter().map(|l| l.n_out))
                .collect();
            if dims != want {
                return Err(Error::Checkpoint(format!(
                    "network shape {dims:?} does not match configuration {want:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Everything the GNN reads: raw features and the normalized outputs of the
/// model-based association.
#[derive(Debug, Clone)]
pub struct GnnInputs {
    pub legacy_motion: Vec<[f64; MOTION_INPUT]>,
    pub legacy_shape: Vec<Vec<f64>>,
    pub meas_motion: Vec<[f64; MOTION_INPUT]>,
    pub meas_shape: Vec<Vec<f64>>,
    /// `I x (J+1)`, each row divided by its `C_q`.
    pub beta_s: DMatrix<f64>,
    /// `xi_j / C_v`.
    pub xi_s: Vec<f64>,
    pub phi: DMatrix<f64>,
    pub nu: DMatrix<f64>,
    /// When false the shape half of every embedding is zero.
    pub use_shape: bool,
}

impl GnnInputs {
    pub fn n_objects(&self) -> usize {
        self.legacy_motion.len()
    }

    pub fn n_measurements(&self) -> usize {
        self.meas_motion.len()
    }
}

fn fit_descriptor(s: &[f64], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for (o, v) in out.iter_mut().zip(s) {
        *o = *v;
    }
    out
}

/// Motion inputs are positions scaled by the ROI half extent, velocities and
/// a confidence (existence for objects, detector score for measurements).
fn motion_input(pos: [f64; 2], vel: [f64; 2], conf: f64, roi: &Roi) -> [f64; MOTION_INPUT] {
    let c = roi.center();
    let h = roi.half_extent();
    [
        (pos[0] - c[0]) / h[0].max(1e-9),
        (pos[1] - c[1]) / h[1].max(1e-9),
        vel[0],
        vel[1],
        conf,
    ]
}

/// Assembles GNN inputs. `previous` are the legacy objects as they were
/// before prediction (their estimates feed the motion features);
/// `beta`, `xi`, `phi`, `nu` come from the converged model-based association.
#[allow(clippy::too_many_arguments)]
pub fn gnn_inputs(
    previous: &[PotentialObject],
    frame: &MeasurementFrame,
    beta: &DMatrix<f64>,
    xi: &[f64],
    phi: &DMatrix<f64>,
    nu: &DMatrix<f64>,
    roi: &Roi,
    config: &NetConfig,
    use_shape: bool,
) -> GnnInputs {
    let n_obj = previous.len();
    let c_q = crate::bp::legacy_normalizers(beta);
    let c_v = crate::bp::new_normalizers(xi, n_obj);
    let mut beta_s = beta.clone();
    for (i, c) in c_q.iter().enumerate() {
        let s = if *c > 0.0 { 1.0 / c } else { 1.0 };
        beta_s.row_mut(i).scale_mut(s);
    }
    GnnInputs {
        legacy_motion: previous
            .iter()
            .map(|po| {
                let m = po.mean();
                motion_input([m.px, m.py], [m.vx, m.vy], po.existence, roi)
            })
            .collect(),
        legacy_shape: previous
            .iter()
            .map(|po| fit_descriptor(&po.shape, config.shape_dim))
            .collect(),
        meas_motion: frame
            .measurements
            .iter()
            .map(|m| motion_input([m.px, m.py], [m.vx, m.vy], m.score, roi))
            .collect(),
        meas_shape: frame
            .measurements
            .iter()
            .map(|m| fit_descriptor(&m.shape, config.shape_dim))
            .collect(),
        beta_s,
        xi_s: xi.iter().zip(&c_v).map(|(x, c)| x / c).collect(),
        phi: phi.clone(),
        nu: nu.clone(),
        use_shape,
    }
}

/// Node embeddings and the edge messages computed from them. Messages are
/// stored row-major over `(i, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GnnState {
    pub h_a: Vec<Vec<f64>>,
    pub h_b: Vec<Vec<f64>>,
    pub m_ab: Vec<Vec<f64>>,
    pub m_ba: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Default)]
pub struct FeatureTapes {
    motion_a: Vec<Tape>,
    shape_a: Vec<Tape>,
    motion_b: Vec<Tape>,
    shape_b: Vec<Tape>,
}

fn embed(
    nets: &NebpNets,
    motion: &[f64],
    shape: &[f64],
    use_shape: bool,
    tapes: (&mut Vec<Tape>, &mut Vec<Tape>),
) -> Vec<f64> {
    let (mut h, tm) = nets.motion.forward(motion).expect("motion input length");
    tapes.0.push(tm);
    if use_shape {
        let (hs, ts) = nets.shape.forward(shape).expect("descriptor length");
        h.extend(hs);
        tapes.1.push(ts);
    } else {
        h.resize(nets.config.embedding_dim(), 0.0);
    }
    h
}

/// Initial embeddings: motion feature followed by shape feature.
pub fn extract_features(nets: &NebpNets, inp: &GnnInputs) -> (GnnState, FeatureTapes) {
    let mut t = FeatureTapes::default();
    let h_a = (0..inp.n_objects())
        .map(|i| {
            embed(
                nets,
                &inp.legacy_motion[i],
                &inp.legacy_shape[i],
                inp.use_shape,
                (&mut t.motion_a, &mut t.shape_a),
            )
        })
        .collect();
    let h_b = (0..inp.n_measurements())
        .map(|j| {
            embed(
                nets,
                &inp.meas_motion[j],
                &inp.meas_shape[j],
                inp.use_shape,
                (&mut t.motion_b, &mut t.shape_b),
            )
        })
        .collect();
    let state = GnnState {
        h_a,
        h_b,
        m_ab: Vec::new(),
        m_ba: Vec::new(),
    };
    (state, t)
}

/// Maps nonnegative message ratios into `[0, 1)`.
fn squash(x: f64) -> f64 {
    if x.is_infinite() {
        1.0
    } else {
        x / (1.0 + x)
    }
}

#[derive(Debug, Clone, Default)]
struct RoundTapes {
    ab: Vec<Tape>,
    ba: Vec<Tape>,
    node_a: Vec<Tape>,
    node_b: Vec<Tape>,
}

#[derive(Debug, Clone, Default)]
pub struct PassTapes {
    rounds: Vec<RoundTapes>,
}

fn edge_round(nets: &NebpNets, st: &mut GnnState, inp: &GnnInputs) -> RoundTapes {
    let (n_obj, n_meas) = (st.h_a.len(), st.h_b.len());
    let mut r = RoundTapes::default();
    st.m_ab.clear();
    st.m_ba.clear();
    let mut x = Vec::with_capacity(nets.edge.input_dim());
    for i in 0..n_obj {
        for j in 0..n_meas {
            x.clear();
            x.extend_from_slice(&st.h_a[i]);
            x.extend_from_slice(&st.h_b[j]);
            x.push(inp.beta_s[(i, j + 1)]);
            x.push(squash(inp.phi[(i, j)]));
            let (m, t) = nets.edge.forward(&x).expect("edge input length");
            st.m_ab.push(m);
            r.ab.push(t);
            *x.last_mut().unwrap() = squash(inp.nu[(i, j)]);
            let (m, t) = nets.edge.forward(&x).expect("edge input length");
            st.m_ba.push(m);
            r.ba.push(t);
        }
    }
    r
}

/// `iters` rounds of edge messages followed by node updates with sum
/// aggregation. The returned state carries messages recomputed from its
/// final embeddings, which is what the refinement heads read.
pub fn gnn_pass(
    mut st: GnnState,
    inp: &GnnInputs,
    nets: &NebpNets,
    iters: usize,
) -> (GnnState, PassTapes) {
    let (n_obj, n_meas) = (st.h_a.len(), st.h_b.len());
    let e = nets.config.embedding_dim();
    let mut tapes = PassTapes::default();
    for _ in 0..iters {
        let mut r = edge_round(nets, &mut st, inp);
        let mut h_a = Vec::with_capacity(n_obj);
        for i in 0..n_obj {
            let mut agg = vec![0.0; e];
            for j in 0..n_meas {
                add_into(&mut agg, &st.m_ba[i * n_meas + j]);
            }
            let mut x = st.h_a[i].clone();
            x.extend(agg);
            x.push(inp.beta_s[(i, 0)]);
            let (h, t) = nets.node.forward(&x).expect("node input length");
            h_a.push(h);
            r.node_a.push(t);
        }
        let mut h_b = Vec::with_capacity(n_meas);
        for j in 0..n_meas {
            let mut agg = vec![0.0; e];
            for i in 0..n_obj {
                add_into(&mut agg, &st.m_ab[i * n_meas + j]);
            }
            let mut x = st.h_b[j].clone();
            x.extend(agg);
            x.push(inp.xi_s[j]);
            let (h, t) = nets.node.forward(&x).expect("node input length");
            h_b.push(h);
            r.node_b.push(t);
        }
        st.h_a = h_a;
        st.h_b = h_b;
        tapes.rounds.push(r);
    }
    tapes.rounds.push(edge_round(nets, &mut st, inp));
    (st, tapes)
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

/// Refinement values and the head outputs they were computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct Refinements {
    pub omega: Vec<f64>,
    pub mu: DMatrix<f64>,
    pub omega_star: Vec<f64>,
    pub mu_star: DMatrix<f64>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `omega = sigmoid(T (omega* - delta))`, a hard threshold at `delta` when
/// `T` is infinite; `mu = max(mu*, 0)`.
pub fn compute_refinements(
    omega_star: &[f64],
    mu_star: &DMatrix<f64>,
    temperature: f64,
    delta: f64,
) -> Refinements {
    let omega = omega_star
        .iter()
        .map(|w| {
            if temperature.is_infinite() {
                match w.partial_cmp(&delta) {
                    Some(std::cmp::Ordering::Greater) => 1.0,
                    Some(std::cmp::Ordering::Less) => 0.0,
                    _ => 0.5,
                }
            } else {
                sigmoid(temperature * (w - delta))
            }
        })
        .collect();
    Refinements {
        omega,
        mu: mu_star.map(|m| m.max(0.0)),
        omega_star: omega_star.to_vec(),
        mu_star: mu_star.clone(),
    }
}

/// A full recorded forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub state: GnnState,
    pub omega_star: Vec<f64>,
    pub mu_star: DMatrix<f64>,
    features: FeatureTapes,
    pass: PassTapes,
    rejection: Vec<Tape>,
    association: Vec<Tape>,
}

impl Forward {
    fn tapes(&self) -> impl Iterator<Item = &Tape> {
        let f = &self.features;
        f.motion_a
            .iter()
            .chain(&f.shape_a)
            .chain(&f.motion_b)
            .chain(&f.shape_b)
            .chain(self.pass.rounds.iter().flat_map(|r| {
                r.ab.iter().chain(&r.ba).chain(&r.node_a).chain(&r.node_b)
            }))
            .chain(&self.rejection)
            .chain(&self.association)
    }

    /// Which side of the kink every hidden unit is on. Two passes with the
    /// same pattern lie on the same linear piece of every network.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.tapes()
            .flat_map(|t| t.hidden_preactivations())
            .map(|p| p >= 0.0)
            .collect()
    }

    /// Distance of the closest hidden unit to its activation kink. Finite
    /// difference checks are only meaningful when this is not tiny.
    pub fn kink_margin(&self) -> f64 {
        self.tapes()
            .flat_map(|t| t.hidden_preactivations())
            .fold(f64::INFINITY, |m, p| m.min(p.abs()))
    }
}

pub fn forward(nets: &NebpNets, inp: &GnnInputs) -> Forward {
    let (st, features) = extract_features(nets, inp);
    let (state, pass) = gnn_pass(st, inp, nets, nets.config.gnn_iters);
    let (n_obj, n_meas) = (state.h_a.len(), state.h_b.len());
    let mut rejection = Vec::with_capacity(n_meas);
    let omega_star = state
        .h_b
        .iter()
        .map(|h| {
            let (y, t) = nets.rejection.forward(h).expect("embedding length");
            rejection.push(t);
            y[0]
        })
        .collect();
    let mut association = Vec::with_capacity(n_obj * n_meas);
    let mu_star = DMatrix::from_row_iterator(
        n_obj,
        n_meas,
        state
            .m_ba
            .iter()
            .map(|m| {
                let (y, t) = nets.association.forward(m).expect("message length");
                association.push(t);
                y[0]
            })
            .collect::<Vec<_>>(),
    );
    Forward {
        state,
        omega_star,
        mu_star,
        features,
        pass,
        rejection,
        association,
    }
}

/// Gradient of a scalar loss with respect to all network parameters (flat
/// layout of [`NebpNets::params`]), given its gradient with respect to the
/// head outputs. The association inputs are constants.
pub fn backward(
    nets: &NebpNets,
    inp: &GnnInputs,
    fwd: &Forward,
    d_omega_star: &[f64],
    d_mu_star: &DMatrix<f64>,
) -> Vec<f64> {
    let off = nets.offsets();
    let mut grads = vec![0.0; off[6]];
    let (g_motion, rest) = grads.split_at_mut(off[1]);
    let (g_shape, rest) = rest.split_at_mut(off[2] - off[1]);
    let (g_edge, rest) = rest.split_at_mut(off[3] - off[2]);
    let (g_node, rest) = rest.split_at_mut(off[4] - off[3]);
    let (g_rej, g_assoc) = rest.split_at_mut(off[5] - off[4]);

    let e = nets.config.embedding_dim();
    let (n_obj, n_meas) = (fwd.state.h_a.len(), fwd.state.h_b.len());
    let mut dh_a = vec![vec![0.0; e]; n_obj];
    let mut dh_b = vec![vec![0.0; e]; n_meas];

    for j in 0..n_meas {
        let dx = nets.rejection.backward(&fwd.rejection[j], &[d_omega_star[j]], g_rej);
        add_into(&mut dh_b[j], &dx);
    }
    let last = fwd.pass.rounds.last().expect("final edge round");
    for i in 0..n_obj {
        for j in 0..n_meas {
            let k = i * n_meas + j;
            let dm = nets
                .association
                .backward(&fwd.association[k], &[d_mu_star[(i, j)]], g_assoc);
            let dx = nets.edge.backward(&last.ba[k], &dm, g_edge);
            add_into(&mut dh_a[i], &dx[..e]);
            add_into(&mut dh_b[j], &dx[e..2 * e]);
        }
    }

    let n_rounds = fwd.pass.rounds.len() - 1;
    for r in fwd.pass.rounds[..n_rounds].iter().rev() {
        let mut prev_a = vec![vec![0.0; e]; n_obj];
        let mut prev_b = vec![vec![0.0; e]; n_meas];
        let mut agg_a = Vec::with_capacity(n_obj);
        for i in 0..n_obj {
            let dx = nets.node.backward(&r.node_a[i], &dh_a[i], g_node);
            add_into(&mut prev_a[i], &dx[..e]);
            agg_a.push(dx[e..2 * e].to_vec());
        }
        let mut agg_b = Vec::with_capacity(n_meas);
        for j in 0..n_meas {
            let dx = nets.node.backward(&r.node_b[j], &dh_b[j], g_node);
            add_into(&mut prev_b[j], &dx[..e]);
            agg_b.push(dx[e..2 * e].to_vec());
        }
        for i in 0..n_obj {
            for j in 0..n_meas {
                let k = i * n_meas + j;
                for (tape, dm) in [(&r.ba[k], &agg_a[i]), (&r.ab[k], &agg_b[j])] {
                    let dx = nets.edge.backward(tape, dm, g_edge);
                    add_into(&mut prev_a[i], &dx[..e]);
                    add_into(&mut prev_b[j], &dx[e..2 * e]);
                }
            }
        }
        dh_a = prev_a;
        dh_b = prev_b;
    }

    let d = nets.config.d_emb;
    let t = &fwd.features;
    for (i, dh) in dh_a.iter().enumerate() {
        nets.motion.backward(&t.motion_a[i], &dh[..d], g_motion);
        if inp.use_shape {
            nets.shape.backward(&t.shape_a[i], &dh[d..], g_shape);
        }
    }
    for (j, dh) in dh_b.iter().enumerate() {
        nets.motion.backward(&t.motion_b[j], &dh[..d], g_motion);
        if inp.use_shape {
            nets.shape.backward(&t.shape_b[j], &dh[d..], g_shape);
        }
    }
    grads
}
