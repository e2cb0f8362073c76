mod common;

use common::gradcheck::{op_cases, transformer_case, TOL};

#[test]
fn every_operator_matches_finite_differences() {
    for (name, case) in op_cases() {
        for seed in 0..20 {
            let err = case(seed);
            assert!(err < TOL, "{name} seed {seed}: relative error {err:e}");
        }
    }
}

#[test]
fn quarter_t1_loss_matches_finite_differences() {
    for seed in 0..20 {
        let err = transformer_case(seed);
        assert!(err < TOL, "seed {seed}: relative error {err:e}");
    }
}
