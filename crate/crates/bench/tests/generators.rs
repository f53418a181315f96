use nebp_bench::{random_da, scene};

#[test]
fn generators_are_deterministic_and_valid() {
    let a = random_da(16, 3);
    assert_eq!((a.n_objects(), a.n_measurements()), (16, 16));
    assert!(a.validate().is_ok());
    assert_eq!(a.beta, random_da(16, 3).beta);

    let (ds, params) = scene(6, 50);
    assert_eq!(ds.frames.len(), 6);
    assert_eq!(params.n_particles, 50);
    assert!(params.validate().is_ok());
}
