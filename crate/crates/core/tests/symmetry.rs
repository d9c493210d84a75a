mod common;

use common::symmetry::*;

#[test]
fn latent_difference_is_antisymmetric() {
    for skip in [false, true] {
        let r = symmetry(skip, 11);
        assert!(r.antisymmetric_bits, "skip={skip}");
        assert!(r.swapped_grids_equal, "skip={skip}");
    }
}

#[test]
fn total_loss_is_swap_invariant() {
    for skip in [false, true] {
        let r = symmetry(skip, 12);
        assert!(r.loss_swap_diff <= 1e-12, "skip={skip}: {r:?}");
    }
}

#[test]
fn zero_epoch_model_is_exact_identity() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(zero_epoch_identity(dir.path()), 0.0);
}
