//! Pseudo ground truth, losses, the training loop and sigmoid calibration.

use std::collections::{HashMap, HashSet};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment;
use crate::bp::TrackerState;
use crate::error::{Error, Result};
use crate::metrics::TrackPoint;
use crate::model::{MeasurementFrame, ModelParams, TrackId};
use crate::nebp::{
    backward, compute_refinements, forward, logit, nebp_complete, nebp_forward, sigmoid,
    Calibration, Checkpoint, GnnInputs, Method, NebpNets, NetConfig,
};
use crate::nn::Adam;
use crate::pipeline::{run_scenes, scene_seed, TrackerSpec};
use crate::simulator::Dataset;

#[derive(Debug, Clone, PartialEq)]
pub struct FrameLabels {
    pub omega_gt: Vec<f64>,
    /// `I x J`, at most one 1 per row.
    pub mu_gt: DMatrix<f64>,
    pub measurement_ids: Vec<Option<TrackId>>,
    /// Identifiers of the legacy objects after this frame's update.
    pub legacy_ids: Vec<Option<TrackId>>,
    /// Identifier each new object would inherit from its measurement.
    pub new_ids: Vec<Option<TrackId>>,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// `legacy` holds each legacy object's identifier from the previous frame
/// and its current position estimate.
pub fn label_frame(
    gt: &[TrackPoint],
    frame: &MeasurementFrame,
    legacy: &[(Option<TrackId>, [f64; 2])],
    t_dist: f64,
) -> FrameLabels {
    let z: Vec<[f64; 2]> = frame.measurements.iter().map(|m| [m.px, m.py]).collect();
    let mut measurement_ids = vec![None; z.len()];
    if !gt.is_empty() && !z.is_empty() {
        let cost: Vec<Vec<f64>> = gt
            .iter()
            .map(|g| z.iter().map(|p| dist(g.pos, *p)).collect())
            .collect();
        for (r, c) in assignment::solve(&cost).into_iter().enumerate() {
            if let Some(c) = c {
                if cost[r][c] < t_dist {
                    measurement_ids[c] = Some(gt[r].id);
                }
            }
        }
    }
    let omega_gt = z
        .iter()
        .map(|p| {
            if gt.iter().any(|g| dist(g.pos, *p) <= t_dist) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let gt_pos: HashMap<TrackId, [f64; 2]> = gt.iter().map(|g| (g.id, g.pos)).collect();
    let legacy_ids: Vec<Option<TrackId>> = legacy
        .iter()
        .map(|(id, pos)| id.filter(|id| gt_pos.get(id).is_some_and(|g| dist(*g, *pos) <= t_dist)))
        .collect();
    let mu_gt = DMatrix::from_fn(legacy.len(), z.len(), |i, j| match (legacy_ids[i], measurement_ids[j]) {
        (Some(a), Some(b)) if a == b => 1.0,
        _ => 0.0,
    });
    let taken: HashSet<TrackId> = legacy_ids.iter().flatten().copied().collect();
    let new_ids = measurement_ids
        .iter()
        .map(|id| id.filter(|id| !taken.contains(id)))
        .collect();
    FrameLabels {
        omega_gt,
        mu_gt,
        measurement_ids,
        legacy_ids,
        new_ids,
    }
}

/// Weighted binary cross-entropy of the rejection weights.
pub fn loss_rejection(omega: &[f64], omega_gt: &[f64], eps: f64) -> f64 {
    if omega.is_empty() {
        return 0.0;
    }
    let s: f64 = omega
        .iter()
        .zip(omega_gt)
        .map(|(w, g)| g * w.ln() + eps * (1.0 - g) * (1.0 - w).ln())
        .sum();
    -s / omega.len() as f64
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Rejection loss at `omega = sigmoid(omega*)` and its gradient with
/// respect to `omega*`, evaluated in log space.
pub fn loss_rejection_logits(omega_star: &[f64], omega_gt: &[f64], eps: f64) -> (f64, Vec<f64>) {
    let n = omega_star.len();
    if n == 0 {
        return (0.0, Vec::new());
    }
    let mut loss = 0.0;
    let grad = omega_star
        .iter()
        .zip(omega_gt)
        .map(|(x, g)| {
            loss += g * softplus(-x) + eps * (1.0 - g) * softplus(*x);
            let w = sigmoid(*x);
            (eps * (1.0 - g) * w - g * (1.0 - w)) / n as f64
        })
        .collect();
    (loss / n as f64, grad)
}

/// Binary cross-entropy on the association logits and its gradient
/// `(sigmoid(mu*) - mu_gt) / (IJ)`.
pub fn loss_association(mu_star: &DMatrix<f64>, mu_gt: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
    let n = mu_star.len();
    if n == 0 {
        return (0.0, mu_star.clone());
    }
    let loss = mu_star
        .iter()
        .zip(mu_gt.iter())
        .map(|(x, g)| g * softplus(-x) + (1.0 - g) * softplus(*x))
        .sum::<f64>()
        / n as f64;
    let grad = mu_star.zip_map(mu_gt, |x, g| (sigmoid(x) - g) / n as f64);
    (loss, grad)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub rejection: f64,
    pub association: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.rejection + self.association
    }
}

/// Loss of one frame and its gradient with respect to every network
/// parameter. The association inputs inside `inp` are constants.
pub fn frame_loss_and_grad(
    nets: &NebpNets,
    inp: &GnnInputs,
    omega_gt: &[f64],
    mu_gt: &DMatrix<f64>,
    eps: f64,
) -> (LossTerms, Vec<f64>) {
    let fwd = forward(nets, inp);
    let (l_r, d_w) = loss_rejection_logits(&fwd.omega_star, omega_gt, eps);
    let (l_a, d_mu) = loss_association(&fwd.mu_star, mu_gt);
    let g = backward(nets, inp, &fwd, &d_w, &d_mu);
    (
        LossTerms {
            rejection: l_r,
            association: l_a,
        },
        g,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub eps: f64,
    pub t_dist: f64,
    pub seed: u64,
    /// Label only; one set of networks is trained per scenario family.
    pub class: String,
    pub net: NetConfig,
    pub use_shape: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            epochs: 8,
            eps: 0.1,
            t_dist: 2.0,
            seed: 0,
            class: "default".into(),
            net: NetConfig::default(),
            use_shape: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::param("lr", "must be positive"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::param("eps", "must be positive"));
        }
        if !(self.t_dist > 0.0) {
            return Err(Error::param("t_dist", "must be positive"));
        }
        if self.net.d_emb == 0 || self.net.hidden == 0 {
            return Err(Error::param("net", "layer sizes must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub frames: usize,
    pub loss: f64,
    pub loss_rejection: f64,
    pub loss_association: f64,
}

pub fn write_log_csv<W: std::io::Write>(out: W, logs: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for l in logs {
        w.serialize(l)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs one scene through the enhanced tracker at training settings,
/// taking an optimizer step after every frame.
fn train_scene(
    ds: &Dataset,
    params: &ModelParams,
    cfg: &TrainConfig,
    ck: &mut Checkpoint,
    adam: &mut Adam,
    seed: u64,
    epoch: usize,
    scene: usize,
    acc: &mut EpochLog,
) -> Result<()> {
    let mut st = TrackerState::new(seed);
    let mut ids: HashMap<TrackId, TrackId> = HashMap::new();
    let gt = crate::metrics::truth_points(&ds.ground_truth);
    for (k, frame) in ds.frames.iter().enumerate() {
        let nf = nebp_forward(&mut st, frame, params, &ck.nets, cfg.use_shape)?;
        let legacy: Vec<(Option<TrackId>, [f64; 2])> = nf
            .prep
            .pred
            .iter()
            .map(|po| {
                let m = po.mean();
                (ids.get(&po.track_id).copied(), [m.px, m.py])
            })
            .collect();
        let labels = label_frame(gt.get(k).map_or(&[][..], |g| &g[..]), &nf.prep.frame, &legacy, cfg.t_dist);
        let (l_r, d_w) = loss_rejection_logits(&nf.forward.omega_star, &labels.omega_gt, cfg.eps);
        let (l_a, d_mu) = loss_association(&nf.forward.mu_star, &labels.mu_gt);
        let loss = l_r + l_a;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                scene,
                frame: k,
                loss,
            });
        }
        let g = backward(&ck.nets, &nf.inputs, &nf.forward, &d_w, &d_mu);
        let mut p = ck.nets.params();
        adam.update(&mut p, &g)?;
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                epoch,
                scene,
                frame: k,
                loss,
            });
        }
        ck.nets.set_params(&p)?;
        acc.frames += 1;
        acc.loss += loss;
        acc.loss_rejection += l_r;
        acc.loss_association += l_a;

        let r = compute_refinements(&nf.forward.omega_star, &nf.forward.mu_star, 1.0, 0.0);
        let out = nebp_complete(&mut st, &nf, &r, params)?;
        ids = nf
            .prep
            .pred
            .iter()
            .zip(&labels.legacy_ids)
            .filter_map(|(po, id)| id.map(|id| (po.track_id, id)))
            .collect();
        for (tid, j) in out.new_origins {
            if let Some(id) = labels.new_ids[j] {
                ids.insert(tid, id);
            }
        }
    }
    Ok(())
}

/// Trains for `cfg.epochs` more epochs starting from `ck`. Scenes are
/// visited in a seeded random order that changes every epoch; `on_epoch`
/// sees each epoch's mean losses.
pub fn train(
    datasets: &[Dataset],
    params: &ModelParams,
    cfg: &TrainConfig,
    mut ck: Checkpoint,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(Checkpoint, Vec<EpochLog>)> {
    cfg.validate()?;
    params.clone().validate()?;
    let mut adam = ck
        .adam
        .take()
        .unwrap_or_else(|| Adam::new(ck.nets.n_params(), cfg.lr));
    adam.lr = cfg.lr;
    let mut logs = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let epoch = ck.epochs_done;
        let mut order: Vec<usize> = (0..datasets.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(scene_seed(cfg.seed, epoch)));
        let mut acc = EpochLog {
            epoch,
            frames: 0,
            loss: 0.0,
            loss_rejection: 0.0,
            loss_association: 0.0,
        };
        for &s in &order {
            train_scene(
                &datasets[s],
                params,
                cfg,
                &mut ck,
                &mut adam,
                scene_seed(cfg.seed, s),
                epoch,
                s,
                &mut acc,
            )?;
        }
        if acc.frames > 0 {
            let n = acc.frames as f64;
            acc.loss /= n;
            acc.loss_rejection /= n;
            acc.loss_association /= n;
        }
        ck.epochs_done += 1;
        on_epoch(&acc);
        logs.push(acc);
    }
    ck.adam = Some(adam);
    Ok((ck, logs))
}

pub const TEMPERATURE_GRID: [f64; 8] = [0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, f64::INFINITY];
pub const BIAS_GRID: [f64; 5] = [0.01, 0.02, 0.05, 0.1, 0.2];

/// One evaluated grid point; `bias_prob` is `sigmoid(delta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub calibration: Calibration,
    pub bias_prob: f64,
    pub cost: f64,
}

/// Exhaustive search minimizing `cost` over `temps x bias_probs`. Ties go
/// to the smaller temperature, then the smaller bias.
pub fn grid_search(
    temps: &[f64],
    bias_probs: &[f64],
    cost: impl Fn(Calibration) -> Result<f64> + Sync,
) -> Result<(Calibration, Vec<GridPoint>)> {
    let mut pts: Vec<(f64, f64)> = temps
        .iter()
        .flat_map(|t| bias_probs.iter().map(move |b| (*t, *b)))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let table: Vec<GridPoint> = pts
        .par_iter()
        .map(|&(t, b)| {
            let calibration = Calibration {
                temperature: t,
                delta: logit(b),
            };
            Ok(GridPoint {
                calibration,
                bias_prob: b,
                cost: cost(calibration)?,
            })
        })
        .collect::<Result<_>>()?;
    let best = table
        .iter()
        .filter(|p| !p.cost.is_nan())
        .fold(None::<&GridPoint>, |best, p| match best {
            Some(b) if b.cost <= p.cost => Some(b),
            _ => Some(p),
        })
        .ok_or_else(|| Error::param("grid", "no finite grid point"))?;
    Ok((best.calibration, table))
}

/// Picks `(T, delta)` minimizing the mean GOSPA of `method` over the
/// calibration scenes.
pub fn calibrate(
    nets: &NebpNets,
    datasets: &[Dataset],
    params: &ModelParams,
    method: Method,
    seed: u64,
) -> Result<(Calibration, Vec<GridPoint>)> {
    grid_search(&TEMPERATURE_GRID, &BIAS_GRID, |cal| {
        let spec = TrackerSpec {
            method,
            nets: Some(nets),
            calibration: cal,
            params,
        };
        let runs = run_scenes(datasets, &spec, seed)?;
        Ok(runs.iter().map(|(_, r)| r.gospa_total).sum::<f64>() / runs.len().max(1) as f64)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Measurement;
    use crate::nebp::gnn::MOTION_INPUT;
    use crate::simulator::PersistentClutterFamily;
    use proptest::prelude::*;
    use rand::Rng;

    fn gtp(id: TrackId, x: f64, y: f64) -> TrackPoint {
        TrackPoint {
            id,
            pos: [x, y],
            score: 1.0,
        }
    }

    fn frame_at(pts: &[[f64; 2]]) -> MeasurementFrame {
        MeasurementFrame::new(
            pts.iter()
                .map(|p| Measurement {
                    px: p[0],
                    py: p[1],
                    vx: 0.0,
                    vy: 0.0,
                    score: 0.5,
                    shape: Vec::new(),
                })
                .collect(),
        )
    }

    #[test]
    fn nearby_measurement_is_labelled_true() {
        let l = label_frame(&[gtp(4, 0.0, 0.0)], &frame_at(&[[1.5, 0.0], [9.0, 9.0]]), &[], 2.0);
        assert_eq!(l.omega_gt, vec![1.0, 0.0]);
        assert_eq!(l.measurement_ids, vec![Some(4), None]);
        assert_eq!(l.new_ids, vec![Some(4), None]);
    }

    #[test]
    fn no_truth_no_labels() {
        let l = label_frame(&[], &frame_at(&[[1.0, 1.0], [2.0, 2.0]]), &[(Some(1), [1.0, 1.0])], 2.0);
        assert!(l.omega_gt.iter().all(|v| *v == 0.0));
        assert!(l.mu_gt.iter().all(|v| *v == 0.0));
        assert_eq!(l.legacy_ids, vec![None]);
    }

    #[test]
    fn legacy_keeps_id_only_near_its_object() {
        let gt = [gtp(1, 0.0, 0.0), gtp(2, 10.0, 0.0)];
        let z = frame_at(&[[0.5, 0.0], [10.2, 0.0]]);
        let legacy = [(Some(1), [0.3, 0.0]), (Some(2), [14.0, 0.0]), (None, [10.0, 0.0])];
        let l = label_frame(&gt, &z, &legacy, 2.0);
        assert_eq!(l.legacy_ids, vec![Some(1), None, None]);
        assert_eq!(l.mu_gt, DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
        // the second object's id is no longer held by a legacy object
        assert_eq!(l.new_ids, vec![None, Some(2)]);
    }

    #[test]
    fn ambiguous_labels_follow_exhaustive_assignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let gt: Vec<TrackPoint> = (0..3)
                .map(|k| gtp(k + 1, rng.random_range(0.0..3.0), rng.random_range(0.0..3.0)))
                .collect();
            let z: Vec<[f64; 2]> = (0..3)
                .map(|_| [rng.random_range(0.0..3.0), rng.random_range(0.0..3.0)])
                .collect();
            let l = label_frame(&gt, &frame_at(&z), &[], 2.0);
            let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
            let cost = |p: &[usize; 3]| (0..3).map(|r| dist(gt[r].pos, z[p[r]])).sum::<f64>();
            let best = perms.iter().min_by(|a, b| cost(a).total_cmp(&cost(b))).unwrap();
            for r in 0..3 {
                let want = (dist(gt[r].pos, z[best[r]]) < 2.0).then_some(gt[r].id);
                assert_eq!(l.measurement_ids[best[r]], want);
            }
        }
    }

    proptest! {
        #[test]
        fn labels_commute_with_permutation(
            g in prop::collection::vec((0.0..6.0f64, 0.0..6.0f64), 0..5),
            z in prop::collection::vec((0.0..6.0f64, 0.0..6.0f64), 0..5),
            legacy in prop::collection::vec((0u64..6, 0.0..6.0f64, 0.0..6.0f64), 0..4),
            shift in 0usize..5,
        ) {
            let gt: Vec<TrackPoint> = g.iter().enumerate().map(|(k, p)| gtp(k as u64 + 1, p.0, p.1)).collect();
            let zs: Vec<[f64; 2]> = z.iter().map(|p| [p.0, p.1]).collect();
            let leg: Vec<(Option<TrackId>, [f64; 2])> =
                legacy.iter().map(|(id, x, y)| ((*id > 0).then_some(*id), [*x, *y])).collect();
            let l = label_frame(&gt, &frame_at(&zs), &leg, 2.0);
            for row in l.mu_gt.row_iter() {
                prop_assert!(row.sum() <= 1.0);
            }
            let mut gt2 = gt.clone();
            let mut z2 = zs.clone();
            if !gt2.is_empty() { let n = gt2.len(); gt2.rotate_left(shift % n); }
            if !z2.is_empty() { let n = z2.len(); z2.rotate_left(shift % n); }
            let l2 = label_frame(&gt2, &frame_at(&z2), &leg, 2.0);
            for (j, p) in zs.iter().enumerate() {
                let j2 = z2.iter().position(|q| q == p).unwrap();
                prop_assert_eq!(l.omega_gt[j], l2.omega_gt[j2]);
                // ties between equidistant pairs may resolve differently
                if gt.len() <= 1 || zs.len() <= 1 {
                    prop_assert_eq!(l.measurement_ids[j], l2.measurement_ids[j2]);
                }
            }
        }
    }

    #[test]
    fn loss_examples() {
        assert!((loss_rejection(&[0.5], &[1.0], 0.1) - 2f64.ln()).abs() < 1e-12);
        assert!(loss_rejection(&[1.0 - 1e-12, 1e-12], &[1.0, 0.0], 0.1) < 1e-10);
        let (l, _) = loss_rejection_logits(&[0.0], &[1.0], 0.1);
        assert!((l - 2f64.ln()).abs() < 1e-12);
        let (la, _) = loss_association(&DMatrix::from_element(1, 1, 0.0), &DMatrix::from_element(1, 1, 1.0));
        assert!((la - 2f64.ln()).abs() < 1e-12);
        let gt = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let far = gt.map(|g| if g == 1.0 { 40.0 } else { -40.0 });
        assert!(loss_association(&far, &gt).0 < 1e-15);
        assert_eq!(loss_rejection_logits(&[], &[], 0.1).0, 0.0);
        assert_eq!(loss_association(&DMatrix::zeros(0, 3), &DMatrix::zeros(0, 3)).0, 0.0);
    }

    #[test]
    fn logit_form_matches_direct_form() {
        let xs = [-3.0, -0.2, 0.0, 1.5, 4.0];
        let gs = [0.0, 1.0, 1.0, 0.0, 1.0];
        let w: Vec<f64> = xs.iter().map(|x| sigmoid(*x)).collect();
        let (l, _) = loss_rejection_logits(&xs, &gs, 0.1);
        assert!((l - loss_rejection(&w, &gs, 0.1)).abs() < 1e-12);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 1e-6;
        let xs: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
        let gs: Vec<f64> = (0..5).map(|_| (rng.random::<f64>() < 0.5) as u8 as f64).collect();
        let (_, g) = loss_rejection_logits(&xs, &gs, 0.1);
        for k in 0..5 {
            let mut p = xs.clone();
            p[k] += h;
            let up = loss_rejection_logits(&p, &gs, 0.1).0;
            p[k] -= 2.0 * h;
            let fd = (up - loss_rejection_logits(&p, &gs, 0.1).0) / (2.0 * h);
            assert!(crate::nn::relative_error(g[k], fd, 1e-8) <= 1e-6);
        }
        let m = DMatrix::from_fn(3, 4, |_, _| rng.random_range(-3.0..3.0));
        let mg = DMatrix::from_fn(3, 4, |i, j| (i == j) as u8 as f64);
        let (_, g) = loss_association(&m, &mg);
        for k in 0..m.len() {
            let mut p = m.clone();
            p[k] += h;
            let up = loss_association(&p, &mg).0;
            p[k] -= 2.0 * h;
            let fd = (up - loss_association(&p, &mg).0) / (2.0 * h);
            assert!(crate::nn::relative_error(g[k], fd, 1e-8) <= 1e-6);
        }
    }

    pub(crate) fn mini_problem(rng: &mut ChaCha8Rng) -> (NebpNets, GnnInputs, Vec<f64>, DMatrix<f64>) {
        let cfg = NetConfig {
            d_emb: 4,
            hidden: 8,
            gnn_iters: 2,
            shape_dim: 3,
        };
        let nets = NebpNets::new(cfg, rng);
        let (n_obj, n_meas) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let mut motion = || {
            let mut m = [0.0; MOTION_INPUT];
            m.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
            m
        };
        let legacy_motion = (0..n_obj).map(|_| motion()).collect();
        let meas_motion = (0..n_meas).map(|_| motion()).collect();
        let shape = |rng: &mut ChaCha8Rng| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let legacy_shape = (0..n_obj).map(|_| shape(rng)).collect();
        let meas_shape = (0..n_meas).map(|_| shape(rng)).collect();
        let mut beta_s = DMatrix::from_fn(n_obj, n_meas + 1, |_, _| rng.random::<f64>());
        for mut row in beta_s.row_iter_mut() {
            let s = row.sum();
            row /= s;
        }
        let inp = GnnInputs {
            legacy_motion,
            legacy_shape,
            meas_motion,
            meas_shape,
            beta_s,
            xi_s: (0..n_meas).map(|_| rng.random::<f64>()).collect(),
            phi: DMatrix::from_fn(n_obj, n_meas, |_, _| rng.random_range(0.0..4.0)),
            nu: DMatrix::from_fn(n_obj, n_meas, |_, _| rng.random_range(0.0..1.0)),
            use_shape: true,
        };
        let w_gt = (0..n_meas).map(|_| (rng.random::<f64>() < 0.5) as u8 as f64).collect();
        let mut mu_gt = DMatrix::zeros(n_obj, n_meas);
        for i in 0..n_obj {
            let j = rng.random_range(0..=n_meas);
            if j < n_meas {
                mu_gt[(i, j)] = 1.0;
            }
        }
        (nets, inp, w_gt, mu_gt)
    }

    /// Largest relative error between the analytic gradient and central
    /// differences with step `h`, skipping parameters whose probes change
    /// the activation pattern. Returns the error and the skipped count.
    pub(crate) fn fd_check(
        nets: &NebpNets,
        inp: &GnnInputs,
        w_gt: &[f64],
        mu_gt: &DMatrix<f64>,
        h: f64,
    ) -> (f64, usize) {
        let (_, g) = frame_loss_and_grad(nets, inp, w_gt, mu_gt, 0.1);
        let pattern = forward(nets, inp).activation_pattern();
        let p = nets.params();
        let mut probe = nets.clone();
        let mut eval = |q: &[f64]| {
            probe.set_params(q).unwrap();
            let f = forward(&probe, inp);
            let l = loss_rejection_logits(&f.omega_star, w_gt, 0.1).0 + loss_association(&f.mu_star, mu_gt).0;
            (l, f.activation_pattern() == pattern)
        };
        let (mut worst, mut skipped) = (0.0f64, 0);
        for k in 0..p.len() {
            let mut q = p.clone();
            q[k] += h;
            let (up, same_up) = eval(&q);
            q[k] -= 2.0 * h;
            let (down, same_down) = eval(&q);
            if !(same_up && same_down) {
                skipped += 1;
                continue;
            }
            let fd = (up - down) / (2.0 * h);
            worst = worst.max(crate::nn::relative_error(g[k], fd, 1e-7));
        }
        (worst, skipped)
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..4 {
            let (nets, inp, w_gt, mu_gt) = mini_problem(&mut rng);
            let (worst, skipped) = fd_check(&nets, &inp, &w_gt, &mu_gt, 1e-4);
            assert!(worst <= 1e-3, "relative error {worst}");
            assert!(skipped * 20 <= nets.n_params(), "{skipped} probes crossed a kink");
        }
    }

    fn tiny_family() -> (Vec<Dataset>, ModelParams) {
        let fam = PersistentClutterFamily {
            n_frames: 10,
            ..PersistentClutterFamily::new(5)
        };
        let data = (0..2).map(|s| Dataset::generate(&fam.scenario(100 + s)).unwrap()).collect();
        let params = ModelParams {
            n_particles: 100,
            ..fam.model_params()
        };
        (data, params)
    }

    fn tiny_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            lr: 1e-3,
            epochs,
            net: NetConfig {
                d_emb: 4,
                hidden: 8,
                gnn_iters: 1,
                shape_dim: 8,
            },
            ..Default::default()
        }
    }

    #[test]
    fn zero_epochs_return_initialization() {
        let (data, params) = tiny_family();
        let cfg = tiny_config(0);
        let init = Checkpoint::new(NebpNets::new(cfg.net, &mut ChaCha8Rng::seed_from_u64(1)));
        let (ck, logs) = train(&data, &params, &cfg, init.clone(), |_| {}).unwrap();
        assert!(logs.is_empty());
        assert_eq!(ck.nets, init.nets);
        assert_eq!(ck.epochs_done, 0);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let (data, params) = tiny_family();
        let cfg = tiny_config(3);
        let init = Checkpoint::new(NebpNets::new(cfg.net, &mut ChaCha8Rng::seed_from_u64(2)));
        let (a, la) = train(&data, &params, &cfg, init.clone(), |_| {}).unwrap();
        let (b, lb) = train(&data, &params, &cfg, init, |_| {}).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_eq!(a.epochs_done, 3);
        assert!(la[2].loss < la[0].loss, "{la:?}");
        let mut buf = Vec::new();
        write_log_csv(&mut buf, &la).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 4);
    }

    #[test]
    fn divergence_is_reported() {
        let (data, params) = tiny_family();
        let cfg = tiny_config(1);
        let mut nets = NebpNets::new(cfg.net, &mut ChaCha8Rng::seed_from_u64(2));
        nets.rejection.layers[1].bias[0] = f64::NAN;
        let err = train(&data, &params, &cfg, Checkpoint::new(nets), |_| {}).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_) | Error::Diverged { .. }), "{err}");
    }

    #[test]
    fn grid_search_tie_breaks_toward_small_values() {
        let (best, table) = grid_search(&TEMPERATURE_GRID, &BIAS_GRID, |_| Ok(1.0)).unwrap();
        assert_eq!(table.len(), 40);
        assert_eq!(best.temperature, 0.5);
        assert!((sigmoid(best.delta) - 0.01).abs() < 1e-12);
        let (one, _) = grid_search(&[4.0], &[0.1], |_| Ok(3.0)).unwrap();
        assert_eq!(one.temperature, 4.0);
    }

    #[test]
    fn grid_search_finds_the_minimum() {
        let target = (16.0, 0.05);
        let (best, _) = grid_search(&TEMPERATURE_GRID, &BIAS_GRID, |c| {
            Ok((c.temperature.min(100.0).ln() - f64::ln(target.0)).abs() + (sigmoid(c.delta) - target.1).abs())
        })
        .unwrap();
        assert_eq!(best.temperature, 16.0);
        assert!((sigmoid(best.delta) - 0.05).abs() < 1e-12);
    }
}
