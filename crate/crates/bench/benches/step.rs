use criterion::{criterion_group, criterion_main, Criterion};
use nebp_bench::scene;
use nebp_core::nebp::{Calibration, Method, NebpNets, NetConfig};
use nebp_core::pipeline::{track_frames, TrackerSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn steps(c: &mut Criterion) {
    let (ds, params) = scene(10, 200);
    let nets = NebpNets::new(
        NetConfig {
            d_emb: 16,
            hidden: 32,
            ..NetConfig::default()
        },
        &mut ChaCha8Rng::seed_from_u64(0),
    );
    let mut g = c.benchmark_group("track_10_frames");
    g.sample_size(20);
    for method in [Method::Bp, Method::Nebp] {
        let spec = TrackerSpec {
            method,
            nets: Some(&nets),
            calibration: Calibration::default(),
            params: &params,
        };
        g.bench_function(method.name(), |b| b.iter(|| track_frames(&ds.frames, &spec, 0).unwrap()));
    }
    let full = NebpNets::new(NetConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
    let spec = TrackerSpec {
        method: Method::Nebp,
        nets: Some(&full),
        calibration: Calibration::default(),
        params: &params,
    };
    g.bench_function("nebp-d128", |b| b.iter(|| track_frames(&ds.frames, &spec, 0).unwrap()));
    g.finish();
}

criterion_group!(benches, steps);
criterion_main!(benches);
