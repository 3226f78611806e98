mod common;

use common::grad::{bayesian_max_rel_err, Probe, BMG_PARAMS};

#[test]
fn bayesian_loss_matches_finite_differences() {
    for seed in 0..10 {
        let err = bayesian_max_rel_err(seed);
        assert!(err < 1e-4, "seed {seed}: rel err {err:e}");
    }
}

#[test]
fn generator_matches_finite_differences_per_submodule() {
    let probe = Probe::new(7);
    for (label, name) in BMG_PARAMS {
        let err = probe.max_rel_err(name, 4);
        assert!(err < 1e-4, "{label} ({name}): rel err {err:e}");
    }
}

#[test]
fn output_head_matches_finite_differences() {
    let probe = Probe::new(11);
    for name in ["head.mid.weight", "head.out.weight", "cma.patch.weight", "cma.layer0.attn.out.weight"] {
        let err = probe.max_rel_err(name, 3);
        assert!(err < 1e-4, "{name}: rel err {err:e}");
    }
}
