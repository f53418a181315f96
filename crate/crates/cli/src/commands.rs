use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use nebp_core::bp::{read_estimates_csv, write_estimates_csv};
use nebp_core::metrics::EvalReport;
use nebp_core::nebp::{Calibration, CalibrationFile, Checkpoint, Method, NebpNets};
use nebp_core::pipeline::{evaluate_scene, scene_seed, track_frames, TrackerSpec};
use nebp_core::simulator::{Dataset, PersistentClutterFamily, ScenarioConfig};
use nebp_core::training::{calibrate, train, write_log_csv, TrainConfig};
use nebp_core::ModelParams;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::io::{create_dir, load_scenes, resolve_params, write_atomic, write_manifest, Scene};
use crate::{CalibrateArgs, Cli, Command, EvaluateArgs, Failure, SimulateArgs, TrackArgs, TrainArgs};

trait Classify<T> {
    fn config(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn config(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Config(e.into()))
    }
    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

pub fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Simulate(a) => simulate(cli, a),
        Command::Track(a) => track(cli, a),
        Command::Train(a) => train_cmd(cli, a),
        Command::Calibrate(a) => calibrate_cmd(cli, a),
        Command::Evaluate(a) => evaluate_cmd(cli, a),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<PathBuf, Failure> {
    let bytes = serde_json::to_vec_pretty(value).runtime()?;
    write_atomic(path, &bytes).runtime()?;
    Ok(path.to_path_buf())
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> nebp_core::Result<()>) -> Result<Vec<u8>, Failure> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn params_for_scenario(cfg: &ScenarioConfig) -> ModelParams {
    ModelParams {
        p_d: cfg.detection_prob,
        mu_fa: cfg.uniform_clutter_rate + cfg.clutter_sources.iter().map(|s| s.rate).sum::<f64>(),
        roi: cfg.roi,
        dt: cfg.dt,
        ..Default::default()
    }
}

fn simulate(cli: &Cli, a: &SimulateArgs) -> Result<(), Failure> {
    let (template, params, family) = match &a.scenario {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .config()?;
            let mut cfg: ScenarioConfig = serde_json::from_str(&text)
                .with_context(|| format!("scenario {}", path.display()))
                .config()?;
            if let Some(n) = a.frames {
                cfg.n_frames = n;
            }
            cfg.validate().config()?;
            let params = params_for_scenario(&cfg);
            (Some(cfg), params, None)
        }
        None => {
            let mut fam = PersistentClutterFamily::new(a.family_seed);
            if let Some(n) = a.frames {
                fam.n_frames = n;
            }
            (None, fam.model_params(), Some(fam))
        }
    };
    let configs: Vec<ScenarioConfig> = (0..a.scenes)
        .map(|k| {
            let s = scene_seed(a.seed, k);
            match (&template, &family) {
                (Some(t), _) => ScenarioConfig {
                    rng_seed: s,
                    ..t.clone()
                },
                (None, Some(f)) => f.scenario(s),
                (None, None) => unreachable!(),
            }
        })
        .collect();
    let datasets: Vec<Dataset> = configs
        .par_iter()
        .map(Dataset::generate)
        .collect::<nebp_core::Result<_>>()
        .config()?;

    create_dir(&a.out).runtime()?;
    let mut outputs = vec![write_json(&a.out.join("params.json"), &params)?];
    if let Some(f) = &family {
        outputs.push(write_json(&a.out.join("family.json"), f)?);
    }
    for (k, ds) in datasets.iter().enumerate() {
        let stem = format!("scene_{k:04}");
        let p = a.out.join(format!("{stem}.json"));
        write_atomic(&p, &serde_json::to_vec(ds).runtime()?).runtime()?;
        outputs.push(p);
        let p = a.out.join(format!("{stem}.measurements.csv"));
        write_atomic(&p, &csv_bytes(|b| ds.write_measurements_csv(b))?).runtime()?;
        outputs.push(p);
        let p = a.out.join(format!("{stem}.truth.csv"));
        write_atomic(&p, &csv_bytes(|b| ds.write_ground_truth_csv(b))?).runtime()?;
        outputs.push(p);
    }
    let inputs: Vec<PathBuf> = a.scenario.iter().cloned().collect();
    write_manifest(&a.out, cli, &inputs, &outputs).runtime()
}

struct Loaded {
    scenes: Vec<Scene>,
    params_path: PathBuf,
    params: ModelParams,
}

fn load_data(d: &crate::DataArgs) -> Result<Loaded, Failure> {
    let scenes = load_scenes(&d.data).config()?;
    let (params_path, params) = resolve_params(&d.data, d.params.as_deref(), d.particles).config()?;
    Ok(Loaded {
        scenes,
        params_path,
        params,
    })
}

impl Loaded {
    fn input_paths(&self) -> Vec<PathBuf> {
        let mut v: Vec<PathBuf> = self.scenes.iter().map(|s| s.path.clone()).collect();
        v.push(self.params_path.clone());
        v
    }

    fn datasets(&self) -> Vec<Dataset> {
        self.scenes.iter().map(|s| s.data.clone()).collect()
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    Checkpoint::load(path)
        .with_context(|| format!("checkpoint {}", path.display()))
        .config()
}

fn parse_method(s: &str) -> Result<Method, Failure> {
    s.parse::<Method>().config()
}

fn track(cli: &Cli, a: &TrackArgs) -> Result<(), Failure> {
    let method = parse_method(&a.method)?;
    let data = load_data(&a.data)?;
    let mut inputs = data.input_paths();
    let nets: Option<NebpNets> = match (&a.checkpoint, method.uses_nets()) {
        (Some(p), true) => {
            inputs.push(p.clone());
            Some(load_checkpoint(p)?.nets)
        }
        (None, true) => {
            return Err(Failure::Config(anyhow!("method `{method}` needs --checkpoint")));
        }
        (_, false) => None,
    };
    let calibration = match &a.calibration {
        Some(p) => {
            inputs.push(p.clone());
            let file = CalibrationFile::load(p)
                .with_context(|| format!("calibration {}", p.display()))
                .config()?;
            let c = file.get(&a.class);
            c.validate().config()?;
            c
        }
        None => Calibration::default(),
    };
    let spec = TrackerSpec {
        method,
        nets: nets.as_ref(),
        calibration,
        params: &data.params,
    };
    let results: Vec<_> = data
        .scenes
        .par_iter()
        .enumerate()
        .map(|(k, s)| track_frames(&s.data.frames, &spec, scene_seed(a.seed, k)))
        .collect::<nebp_core::Result<_>>()?;

    create_dir(&a.out).runtime()?;
    let mut outputs = Vec::with_capacity(results.len());
    for (s, est) in data.scenes.iter().zip(&results) {
        let p = a.out.join(format!("{}.estimates.csv", s.name));
        write_atomic(&p, &csv_bytes(|b| write_estimates_csv(b, est))?).runtime()?;
        outputs.push(p);
    }
    write_manifest(&a.out, cli, &inputs, &outputs).runtime()
}

fn train_cmd(cli: &Cli, a: &TrainArgs) -> Result<(), Failure> {
    let data = load_data(&a.data)?;
    let mut inputs = data.input_paths();
    let mut cfg = match &a.config {
        Some(p) => {
            inputs.push(p.clone());
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading {}", p.display()))
                .config()?;
            serde_json::from_str::<TrainConfig>(&text)
                .with_context(|| format!("training config {}", p.display()))
                .config()?
        }
        None => TrainConfig::default(),
    };
    cfg.seed = a.seed;
    cfg.validate().config()?;
    let ck = match &a.checkpoint {
        Some(p) => {
            inputs.push(p.clone());
            load_checkpoint(p)?
        }
        None => Checkpoint::new(NebpNets::new(cfg.net, &mut ChaCha8Rng::seed_from_u64(cfg.seed))),
    };
    if ck.nets.config != cfg.net && a.checkpoint.is_some() {
        eprintln!("note: network sizes taken from the checkpoint");
    }
    let datasets = data.datasets();
    let (ck, logs) = train(&datasets, &data.params, &cfg, ck, |log| {
        eprintln!("{}", serde_json::to_string(log).unwrap_or_default());
    })?;

    create_dir(&a.out).runtime()?;
    let ck_path = a.out.join("checkpoint.json");
    write_atomic(&ck_path, ck.to_json()?.as_bytes()).runtime()?;
    let log_path = a.out.join("train_log.csv");
    write_atomic(&log_path, &csv_bytes(|b| write_log_csv(b, &logs))?).runtime()?;
    let cfg_path = write_json(&a.out.join("train_config.json"), &cfg)?;
    write_manifest(&a.out, cli, &inputs, &[ck_path, log_path, cfg_path]).runtime()
}

fn calibrate_cmd(cli: &Cli, a: &CalibrateArgs) -> Result<(), Failure> {
    let method = parse_method(&a.method)?;
    if !method.uses_nets() {
        return Err(Failure::Config(anyhow!("method `{method}` has nothing to calibrate")));
    }
    let data = load_data(&a.data)?;
    let mut inputs = data.input_paths();
    inputs.push(a.checkpoint.clone());
    let ck = load_checkpoint(&a.checkpoint)?;
    let (best, table) = calibrate(&ck.nets, &data.datasets(), &data.params, method, a.seed)?;

    create_dir(&a.out).runtime()?;
    let cal_path = a.out.join("calibration.json");
    CalibrationFile::single(&a.class, best).save(&cal_path).runtime()?;
    let grid = csv_bytes(|b| {
        let mut w = csv::Writer::from_writer(b);
        w.write_record(["temperature", "bias_prob", "delta", "cost"])?;
        for g in &table {
            w.write_record([
                g.calibration.temperature.to_string(),
                g.bias_prob.to_string(),
                g.calibration.delta.to_string(),
                g.cost.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    })?;
    let grid_path = a.out.join("calibration_grid.csv");
    write_atomic(&grid_path, &grid).runtime()?;
    write_manifest(&a.out, cli, &inputs, &[cal_path, grid_path]).runtime()
}

#[derive(Serialize)]
struct SceneReport<'a> {
    scene: &'a str,
    report: &'a EvalReport,
}

fn evaluate_cmd(cli: &Cli, a: &EvaluateArgs) -> Result<(), Failure> {
    let scenes = load_scenes(&a.data).config()?;
    let mut inputs: Vec<PathBuf> = scenes.iter().map(|s| s.path.clone()).collect();
    let mut reports = Vec::with_capacity(scenes.len());
    for s in &scenes {
        let p = a.estimates.join(format!("{}.estimates.csv", s.name));
        let file = std::fs::File::open(&p)
            .with_context(|| format!("estimates for scene {}", s.name))
            .config()?;
        let mut est = read_estimates_csv(file)
            .with_context(|| format!("reading {}", p.display()))
            .config()?;
        let n = s.data.frames.len();
        if est.len() > n {
            return Err(Failure::Config(anyhow!(
                "{} has {} frames, scene has {n}",
                p.display(),
                est.len()
            )));
        }
        est.resize(n, Vec::new());
        reports.push(evaluate_scene(&s.data, &est));
        inputs.push(p);
    }
    let mean = EvalReport::mean(&reports).ok_or_else(|| Failure::Config(anyhow!("no scenes")))?;

    let table = csv_bytes(|b| {
        let mut w = csv::Writer::from_writer(b);
        w.write_record(EvalReport::CSV_HEADER)?;
        for (s, r) in scenes.iter().zip(&reports) {
            w.write_record(r.csv_row(&s.name))?;
        }
        w.write_record(mean.csv_row("mean"))?;
        w.flush()?;
        Ok(())
    })?;
    create_dir(&a.out).runtime()?;
    let csv_path = a.out.join("report.csv");
    write_atomic(&csv_path, &table).runtime()?;
    let per_scene: Vec<SceneReport> = scenes
        .iter()
        .zip(&reports)
        .map(|(s, r)| SceneReport {
            scene: &s.name,
            report: r,
        })
        .collect();
    let json_path = write_json(
        &a.out.join("report.json"),
        &serde_json::json!({ "scenes": per_scene, "mean": mean }),
    )?;
    println!(
        "{}",
        serde_json::json!({
            "scenes": reports.len(),
            "gospa": mean.gospa_total,
            "amota": mean.amota,
            "mota": mean.mota,
            "ids": mean.ids,
        })
    );
    write_manifest(&a.out, cli, &inputs, &[csv_path, json_path]).runtime()
}
