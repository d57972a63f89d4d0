mod common;

#[test]
fn transformer_loss_gradients_match_finite_differences() {
    let toy = common::ToyNets::new(0);
    assert!(toy.param_count() <= 2000, "{} parameters", toy.param_count());
    for seed in 0..3 {
        let (n, worst) = common::probe_ash_plus_gradients(seed, 40);
        eprintln!("seed {seed}: worst {worst:e}");
        assert!(worst <= 1e-3, "seed {seed}: worst relative error {worst} over {n} probes");
    }
}

#[test]
fn transformer_gradients_are_not_trivially_zero() {
    let toy = common::ToyNets::new(1);
    let nonzero: usize = toy.grads().iter().map(|g| g.data().iter().filter(|v| v.abs() > 1e-8).count()).sum();
    assert!(nonzero > 100, "{nonzero} non-zero gradient entries");
}
