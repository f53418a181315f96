use nebp_core::bp::{read_estimates_csv, write_estimates_csv};
use nebp_core::metrics::{estimate_points, gospa, truth_points, GospaParams};
use nebp_core::nebp::{Calibration, CalibrationFile, Checkpoint, Method, NebpNets, NetConfig};
use nebp_core::pipeline::{evaluate_scene, track_frames, TrackerSpec};
use nebp_core::simulator::{Birth, Dataset, ScenarioConfig};
use nebp_core::{KinematicState, ModelParams, Roi};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn two_crossing_objects() -> Dataset {
    let cfg = ScenarioConfig {
        n_frames: 30,
        roi: Roi::square(30.0),
        birth_schedule: vec![
            Birth {
                frame: 0,
                state: KinematicState::new(-10.0, -3.0, 1.0, 0.2),
                shape: None,
            },
            Birth {
                frame: 0,
                state: KinematicState::new(10.0, 3.0, -1.0, -0.2),
                shape: None,
            },
        ],
        detection_prob: 0.95,
        uniform_clutter_rate: 1.0,
        rng_seed: 3,
        ..Default::default()
    };
    Dataset::generate(&cfg).unwrap()
}

fn params_for(ds: &Dataset) -> ModelParams {
    ModelParams {
        p_d: ds.config.detection_prob,
        mu_fa: ds.config.uniform_clutter_rate,
        roi: ds.config.roi,
        dt: ds.config.dt,
        n_particles: 300,
        ..Default::default()
    }
}

fn bp_spec(params: &ModelParams) -> TrackerSpec<'_> {
    TrackerSpec {
        method: Method::Bp,
        nets: None,
        calibration: Calibration::default(),
        params,
    }
}

#[test]
fn bp_follows_two_objects_through_light_clutter() {
    let ds = two_crossing_objects();
    let params = params_for(&ds);
    let est = track_frames(&ds.frames, &bp_spec(&params), 1).unwrap();
    let rep = evaluate_scene(&ds, &est);
    // After a short confirmation period both objects are held.
    let settled = &est[5..];
    let held = settled.iter().filter(|f| f.len() == 2).count();
    assert!(held * 10 >= settled.len() * 8, "two tracks in {held}/{} frames", settled.len());
    let (_, per_frame) = gospa(&estimate_points(&est), &truth_points(&ds.ground_truth), GospaParams::default());
    let late: f64 = per_frame[5..].iter().map(|t| t.localization).sum::<f64>() / (per_frame.len() - 5) as f64;
    assert!(late < 2.0, "mean localization term {late}");
    assert!(rep.amota > 0.5, "amota {}", rep.amota);
}

#[test]
fn files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = two_crossing_objects();
    let p = dir.path().join("scene.json");
    ds.save(&p).unwrap();
    assert_eq!(Dataset::load(&p).unwrap(), ds);

    let params = params_for(&ds);
    let est = track_frames(&ds.frames[..8], &bp_spec(&params), 2).unwrap();
    let mut buf = Vec::new();
    write_estimates_csv(&mut buf, &est).unwrap();
    let back = read_estimates_csv(buf.as_slice()).unwrap();
    assert_eq!(back.len(), est.iter().rposition(|f| !f.is_empty()).map_or(0, |k| k + 1));
    for (a, b) in est.iter().zip(&back) {
        assert_eq!(a, b);
    }

    let nets = NebpNets::new(
        NetConfig {
            d_emb: 4,
            hidden: 8,
            gnn_iters: 1,
            shape_dim: 8,
        },
        &mut ChaCha8Rng::seed_from_u64(1),
    );
    let p = dir.path().join("ck.json");
    Checkpoint::new(nets.clone()).save(&p).unwrap();
    assert_eq!(Checkpoint::load(&p).unwrap().nets.params(), nets.params());

    let cal = Calibration {
        temperature: f64::INFINITY,
        delta: -2.0,
    };
    let p = dir.path().join("cal.json");
    CalibrationFile::single("car", cal).save(&p).unwrap();
    let file = CalibrationFile::load(&p).unwrap();
    assert_eq!(file.get("car"), cal);
}

#[test]
fn trained_tracker_runs_every_method() {
    let ds = two_crossing_objects();
    let params = ModelParams {
        n_particles: 100,
        ..params_for(&ds)
    };
    let nets = NebpNets::new(
        NetConfig {
            d_emb: 4,
            hidden: 8,
            gnn_iters: 2,
            shape_dim: 8,
        },
        &mut ChaCha8Rng::seed_from_u64(9),
    );
    for method in Method::ALL {
        let spec = TrackerSpec {
            method,
            nets: Some(&nets),
            calibration: Calibration::default(),
            params: &params,
        };
        let a = track_frames(&ds.frames[..10], &spec, 4).unwrap();
        let b = track_frames(&ds.frames[..10], &spec, 4).unwrap();
        assert_eq!(a, b, "{method} is not deterministic");
        assert_eq!(a.len(), 10);
    }
}
