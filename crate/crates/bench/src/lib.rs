//! Input generators shared by the benchmarks.

use nalgebra::DMatrix;
use nebp_core::bp::DaInputs;
use nebp_core::simulator::{Dataset, PersistentClutterFamily};
use nebp_core::ModelParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random data-association problem with `n` objects and `n` measurements.
pub fn random_da(n: usize, seed: u64) -> DaInputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beta = DMatrix::from_fn(n, n + 1, |_, j| {
        if j == 0 {
            rng.random_range(0.1..1.0)
        } else {
            rng.random_range(0.0..5.0)
        }
    });
    let xi = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
    DaInputs::new(beta, xi).expect("valid inputs")
}

/// A persistent-clutter scene of `frames` frames and matching parameters.
pub fn scene(frames: usize, particles: usize) -> (Dataset, ModelParams) {
    let fam = PersistentClutterFamily {
        n_frames: frames,
        ..PersistentClutterFamily::new(1)
    };
    let ds = Dataset::generate(&fam.scenario(0)).expect("valid scenario");
    let params = ModelParams {
        n_particles: particles,
        ..fam.model_params()
    };
    (ds, params)
}
