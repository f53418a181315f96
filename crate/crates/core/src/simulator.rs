//! Synthetic scenarios: constant-velocity ground truth plus a detector model
//! whose false alarms may be persistent and spatially concentrated.
//!
//! Uniform clutter follows the tracker's own statistical model. Clutter
//! sources do not: they emit detections at a fixed place, frame after
//! frame, carrying a fixed shape descriptor. A model-based tracker reads
//! them as real objects; a learned rejection head can recognize them.

use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix2, Vector2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{KinematicState, Measurement, MeasurementFrame, ModelParams, Roi, TrackId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Birth {
    pub frame: usize,
    pub state: KinematicState,
    /// Shape descriptor; drawn uniformly on the unit sphere when absent.
    #[serde(default)]
    pub shape: Option<Vec<f64>>,
}

/// Object `object` (index into the birth schedule) is gone from `frame` on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Death {
    pub object: usize,
    pub frame: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClutterSource {
    pub position: [f64; 2],
    pub shape: Vec<f64>,
    /// Mean number of detections per frame.
    pub rate: f64,
    /// Positional standard deviation of the emitted detections (m).
    pub spread: f64,
}

/// Beta-distributed detector confidences for true and false detections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreModel {
    pub true_alpha: f64,
    pub true_beta: f64,
    pub clutter_alpha: f64,
    pub clutter_beta: f64,
}

impl Default for ScoreModel {
    fn default() -> Self {
        ScoreModel {
            true_alpha: 5.0,
            true_beta: 2.0,
            clutter_alpha: 2.0,
            clutter_beta: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub n_frames: usize,
    pub dt: f64,
    pub roi: Roi,
    pub birth_schedule: Vec<Birth>,
    #[serde(default)]
    pub death_schedule: Vec<Death>,
    #[serde(default)]
    pub clutter_sources: Vec<ClutterSource>,
    pub uniform_clutter_rate: f64,
    pub detection_prob: f64,
    pub meas_noise_cov: [[f64; 2]; 2],
    /// Noise on the measured velocity components (m/s).
    pub vel_noise_std: f64,
    /// White-noise acceleration driving the ground truth (m/s^2).
    pub accel_std: f64,
    pub shape_dim: usize,
    pub shape_noise_std: f64,
    /// Velocity spread of uniform clutter (m/s).
    pub clutter_vel_std: f64,
    #[serde(default)]
    pub scores: ScoreModel,
    pub rng_seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            n_frames: 40,
            dt: 0.5,
            roi: Roi::square(54.0),
            birth_schedule: Vec::new(),
            death_schedule: Vec::new(),
            clutter_sources: Vec::new(),
            uniform_clutter_rate: 0.0,
            detection_prob: 0.9,
            meas_noise_cov: [[0.25, 0.0], [0.0, 0.25]],
            vel_noise_std: 0.5,
            accel_std: 0.0,
            shape_dim: 8,
            shape_noise_std: 0.2,
            clutter_vel_std: 1.0,
            scores: ScoreModel::default(),
            rng_seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |s: String| Err(Error::InvalidScenario(s));
        if !(self.dt > 0.0) {
            return bad("dt must be positive".into());
        }
        if !(self.roi.area() > 0.0) {
            return bad("roi must have positive area".into());
        }
        for (k, b) in self.birth_schedule.iter().enumerate() {
            if b.frame >= self.n_frames {
                return bad(format!("birth {k} at frame {} >= n_frames", b.frame));
            }
            if !b.state.is_finite() {
                return bad(format!("birth {k} has a non-finite state"));
            }
            if let Some(s) = &b.shape {
                if s.len() != self.shape_dim {
                    return bad(format!("birth {k} descriptor length {} != {}", s.len(), self.shape_dim));
                }
            }
        }
        for d in &self.death_schedule {
            if d.object >= self.birth_schedule.len() {
                return bad(format!("death refers to unknown object {}", d.object));
            }
            if d.frame > self.n_frames {
                return bad(format!("death frame {} > n_frames", d.frame));
            }
        }
        for (k, c) in self.clutter_sources.iter().enumerate() {
            if !(c.rate >= 0.0 && c.rate.is_finite()) || !(c.spread >= 0.0) {
                return bad(format!("clutter source {k} has a negative rate or spread"));
            }
            if c.shape.len() != self.shape_dim {
                return bad(format!("clutter source {k} descriptor has wrong length"));
            }
        }
        if !(self.uniform_clutter_rate >= 0.0 && self.uniform_clutter_rate.is_finite()) {
            return bad("uniform_clutter_rate must be nonnegative".into());
        }
        if !(0.0..=1.0).contains(&self.detection_prob) {
            return bad("detection_prob must lie in [0, 1]".into());
        }
        let r = self.meas_noise_cov;
        if r[0][1] != r[1][0] || r[0][0] < 0.0 || r[0][0] * r[1][1] - r[0][1] * r[1][0] < 0.0 {
            return bad("meas_noise_cov must be symmetric positive semidefinite".into());
        }
        if [self.vel_noise_std, self.accel_std, self.shape_noise_std, self.clutter_vel_std]
            .iter()
            .any(|v| !(*v >= 0.0))
        {
            return bad("noise levels must be nonnegative".into());
        }
        let s = &self.scores;
        if [s.true_alpha, s.true_beta, s.clutter_alpha, s.clutter_beta]
            .iter()
            .any(|v| !(*v > 0.0))
        {
            return bad("score model parameters must be positive".into());
        }
        Ok(())
    }

    fn meas_noise_factor(&self) -> Matrix2<f64> {
        let r = self.meas_noise_cov;
        let m = Matrix2::new(r[0][0], r[0][1], r[1][0], r[1][1]);
        let eig = m.symmetric_eigen();
        eig.eigenvectors * Matrix2::from_diagonal(&eig.eigenvalues.map(|e| e.max(0.0).sqrt()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    pub id: TrackId,
    pub state: KinematicState,
    pub shape: Vec<f64>,
}

/// Per-frame list of existing objects. Ids are `birth index + 1`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub frames: Vec<Vec<GtObject>>,
}

const GT_STREAM: u64 = 0;
const MEAS_STREAM: u64 = 1;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn random_unit_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn perturbed_descriptor<R: Rng + ?Sized>(base: &[f64], noise: f64, rng: &mut R) -> Vec<f64> {
    let v: Vec<f64> = base
        .iter()
        .map(|b| b + noise * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 1e-12 {
        v.into_iter().map(|x| x / n).collect()
    } else {
        base.to_vec()
    }
}

fn poisson<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> usize {
    if rate <= 0.0 {
        return 0;
    }
    Poisson::new(rate).map(|d| d.sample(rng) as usize).unwrap_or(0)
}

fn beta_score<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    let s: f64 = Beta::new(a, b).map(|d| d.sample(rng)).unwrap_or(0.5);
    s.clamp(1e-6, 1.0)
}

/// Constant-velocity trajectories driven by white-noise acceleration.
pub fn generate_ground_truth(cfg: &ScenarioConfig) -> Result<GroundTruth> {
    cfg.validate()?;
    let mut rng = rng_for(cfg.rng_seed, GT_STREAM);
    let accel = Normal::new(0.0, cfg.accel_std).map_err(|e| Error::InvalidScenario(e.to_string()))?;
    let dt = cfg.dt;

    let shapes: Vec<Vec<f64>> = cfg
        .birth_schedule
        .iter()
        .map(|b| {
            b.shape
                .clone()
                .unwrap_or_else(|| random_unit_vector(cfg.shape_dim, &mut rng))
        })
        .collect();
    let death: Vec<usize> = (0..cfg.birth_schedule.len())
        .map(|k| {
            cfg.death_schedule
                .iter()
                .filter(|d| d.object == k)
                .map(|d| d.frame)
                .min()
                .unwrap_or(cfg.n_frames)
        })
        .collect();

    let mut states: Vec<Option<KinematicState>> = vec![None; cfg.birth_schedule.len()];
    let mut frames = Vec::with_capacity(cfg.n_frames);
    for k in 0..cfg.n_frames {
        let mut objects = Vec::new();
        for (idx, birth) in cfg.birth_schedule.iter().enumerate() {
            if k < birth.frame || k >= death[idx] {
                states[idx] = None;
                continue;
            }
            let next = match states[idx] {
                None => birth.state,
                Some(s) => {
                    let ax: f64 = accel.sample(&mut rng);
                    let ay: f64 = accel.sample(&mut rng);
                    KinematicState::new(
                        s.px + s.vx * dt + 0.5 * ax * dt * dt,
                        s.py + s.vy * dt + 0.5 * ay * dt * dt,
                        s.vx + ax * dt,
                        s.vy + ay * dt,
                    )
                }
            };
            states[idx] = Some(next);
            objects.push(GtObject {
                id: idx as TrackId + 1,
                state: next,
                shape: shapes[idx].clone(),
            });
        }
        frames.push(objects);
    }
    Ok(GroundTruth { frames })
}

/// Detections for every frame plus, in parallel, the originating object id
/// of each detection (`None` for false alarms).
pub fn generate_measurements(
    gt: &GroundTruth,
    cfg: &ScenarioConfig,
) -> Result<(Vec<MeasurementFrame>, Vec<Vec<Option<TrackId>>>)> {
    cfg.validate()?;
    let mut rng = rng_for(cfg.rng_seed, MEAS_STREAM);
    let noise = cfg.meas_noise_factor();
    let s = &cfg.scores;
    let mut frames = Vec::with_capacity(gt.frames.len());
    let mut origins = Vec::with_capacity(gt.frames.len());

    for objects in &gt.frames {
        let mut ms: Vec<(Measurement, Option<TrackId>)> = Vec::new();
        for obj in objects {
            if !rng.random_bool(cfg.detection_prob) {
                continue;
            }
            let e = noise * Vector2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
            let m = Measurement {
                px: obj.state.px + e[0],
                py: obj.state.py + e[1],
                vx: obj.state.vx + cfg.vel_noise_std * rng.sample::<f64, _>(StandardNormal),
                vy: obj.state.vy + cfg.vel_noise_std * rng.sample::<f64, _>(StandardNormal),
                score: beta_score(s.true_alpha, s.true_beta, &mut rng),
                shape: perturbed_descriptor(&obj.shape, cfg.shape_noise_std, &mut rng),
            };
            if cfg.roi.contains(m.px, m.py) {
                ms.push((m, Some(obj.id)));
            }
        }

        for _ in 0..poisson(cfg.uniform_clutter_rate, &mut rng) {
            let m = Measurement {
                px: rng.random_range(cfg.roi.x_min..=cfg.roi.x_max),
                py: rng.random_range(cfg.roi.y_min..=cfg.roi.y_max),
                vx: cfg.clutter_vel_std * rng.sample::<f64, _>(StandardNormal),
                vy: cfg.clutter_vel_std * rng.sample::<f64, _>(StandardNormal),
                score: beta_score(s.clutter_alpha, s.clutter_beta, &mut rng),
                shape: random_unit_vector(cfg.shape_dim, &mut rng),
            };
            ms.push((m, None));
        }

        for src in &cfg.clutter_sources {
            for _ in 0..poisson(src.rate, &mut rng) {
                let m = Measurement {
                    px: src.position[0] + src.spread * rng.sample::<f64, _>(StandardNormal),
                    py: src.position[1] + src.spread * rng.sample::<f64, _>(StandardNormal),
                    vx: cfg.vel_noise_std * rng.sample::<f64, _>(StandardNormal),
                    vy: cfg.vel_noise_std * rng.sample::<f64, _>(StandardNormal),
                    score: beta_score(s.clutter_alpha, s.clutter_beta, &mut rng),
                    shape: perturbed_descriptor(&src.shape, cfg.shape_noise_std, &mut rng),
                };
                if cfg.roi.contains(m.px, m.py) {
                    ms.push((m, None));
                }
            }
        }

        ms.shuffle(&mut rng);
        let (m, o): (Vec<_>, Vec<_>) = ms.into_iter().unzip();
        frames.push(MeasurementFrame::new(m));
        origins.push(o);
    }
    Ok((frames, origins))
}

/// A generated scenario: configuration, ground truth and detections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub config: ScenarioConfig,
    pub ground_truth: GroundTruth,
    pub frames: Vec<MeasurementFrame>,
    /// Originating ground-truth id per detection; `None` marks false alarms.
    pub origins: Vec<Vec<Option<TrackId>>>,
}

impl Dataset {
    pub fn generate(cfg: &ScenarioConfig) -> Result<Self> {
        let ground_truth = generate_ground_truth(cfg)?;
        let (frames, origins) = generate_measurements(&ground_truth, cfg)?;
        Ok(Dataset {
            config: cfg.clone(),
            ground_truth,
            frames,
            origins,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    /// `frame, id, px, py, vx, vy, score, shape_0..shape_{D-1}`; `id` is the
    /// originating object or -1 for false alarms.
    pub fn write_measurements_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = ["frame", "id", "px", "py", "vx", "vy", "score"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend((0..self.config.shape_dim).map(|d| format!("shape_{d}")));
        w.write_record(&header)?;
        for (k, (frame, origin)) in self.frames.iter().zip(&self.origins).enumerate() {
            for (m, o) in frame.measurements.iter().zip(origin) {
                let mut rec = vec![
                    k.to_string(),
                    o.map_or("-1".to_string(), |id| id.to_string()),
                    m.px.to_string(),
                    m.py.to_string(),
                    m.vx.to_string(),
                    m.vy.to_string(),
                    m.score.to_string(),
                ];
                rec.extend(m.shape.iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_ground_truth_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["frame", "id", "px", "py", "vx", "vy"])?;
        for (k, objs) in self.ground_truth.frames.iter().enumerate() {
            for o in objs {
                w.write_record([
                    k.to_string(),
                    o.id.to_string(),
                    o.state.px.to_string(),
                    o.state.py.to_string(),
                    o.state.vx.to_string(),
                    o.state.vy.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Fixed properties of a family of persistent-clutter scenarios: the
/// descriptors of the clutter-generating structures are shared by every
/// scene of the family, their positions are not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersistentClutterFamily {
    pub half_width: f64,
    pub n_frames: usize,
    pub n_objects: (usize, usize),
    pub source_shapes: Vec<Vec<f64>>,
    pub source_rate: (f64, f64),
    pub source_spread: f64,
    pub uniform_clutter_rate: f64,
    pub detection_prob: f64,
    pub speed: (f64, f64),
}

impl PersistentClutterFamily {
    pub fn new(family_seed: u64) -> Self {
        let mut rng = rng_for(family_seed, 7);
        let shape_dim = 8;
        PersistentClutterFamily {
            half_width: 30.0,
            n_frames: 40,
            n_objects: (3, 6),
            source_shapes: (0..3).map(|_| random_unit_vector(shape_dim, &mut rng)).collect(),
            source_rate: (0.7, 0.95),
            source_spread: 0.3,
            uniform_clutter_rate: 2.0,
            detection_prob: 0.9,
            speed: (0.3, 1.5),
        }
    }

    /// Mean total false-alarm count per frame; the matching clutter
    /// intensity for a tracker that assumes uniform clutter.
    pub fn mean_false_alarms(&self) -> f64 {
        self.uniform_clutter_rate
            + self.source_shapes.len() as f64 * 0.5 * (self.source_rate.0 + self.source_rate.1)
    }

    /// Tracker parameters matched to the family, with clutter modelled as
    /// uniform.
    pub fn model_params(&self) -> ModelParams {
        ModelParams {
            p_d: self.detection_prob,
            mu_fa: self.mean_false_alarms(),
            roi: Roi::square(self.half_width),
            ..Default::default()
        }
    }

    pub fn scenario(&self, scene_seed: u64) -> ScenarioConfig {
        let mut rng = rng_for(scene_seed, 11);
        let shape_dim = self.source_shapes.first().map_or(8, Vec::len);
        let inner = 0.6 * self.half_width;
        let n = rng.random_range(self.n_objects.0..=self.n_objects.1);
        let mut births = Vec::with_capacity(n);
        let mut deaths = Vec::new();
        for k in 0..n {
            let frame = if k < n / 2 {
                0
            } else {
                rng.random_range(0..self.n_frames / 2)
            };
            let heading = rng.random_range(0.0..std::f64::consts::TAU);
            let speed = rng.random_range(self.speed.0..self.speed.1);
            births.push(Birth {
                frame,
                state: KinematicState::new(
                    rng.random_range(-inner..inner),
                    rng.random_range(-inner..inner),
                    speed * heading.cos(),
                    speed * heading.sin(),
                ),
                shape: None,
            });
            if rng.random_bool(0.3) {
                deaths.push(Death {
                    object: k,
                    frame: rng.random_range(frame + self.n_frames / 4..self.n_frames),
                });
            }
        }
        let sources = self
            .source_shapes
            .iter()
            .map(|shape| ClutterSource {
                position: [
                    rng.random_range(-0.8 * self.half_width..0.8 * self.half_width),
                    rng.random_range(-0.8 * self.half_width..0.8 * self.half_width),
                ],
                shape: shape.clone(),
                rate: rng.random_range(self.source_rate.0..self.source_rate.1),
                spread: self.source_spread,
            })
            .collect();
        ScenarioConfig {
            n_frames: self.n_frames,
            dt: 0.5,
            roi: Roi::square(self.half_width),
            birth_schedule: births,
            death_schedule: deaths,
            clutter_sources: sources,
            uniform_clutter_rate: self.uniform_clutter_rate,
            detection_prob: self.detection_prob,
            meas_noise_cov: [[0.25, 0.0], [0.0, 0.25]],
            vel_noise_std: 0.5,
            accel_std: 0.2,
            shape_dim,
            shape_noise_std: 0.2,
            clutter_vel_std: 1.0,
            scores: ScoreModel::default(),
            rng_seed: scene_seed,
        }
    }
}
