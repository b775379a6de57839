mod common;

use common::{ref_tap_shapes, shape_suite};
use famnet::model::Branch;

#[test]
fn bookkeeping_oracle_matches_resnet18_layout() {
    assert_eq!(
        ref_tap_shapes(Branch::TwoD, 1.0, 224, 16),
        [[64, 1, 56, 56], [128, 1, 28, 28], [256, 1, 14, 14], [512, 1, 7, 7]]
    );
    assert_eq!(
        ref_tap_shapes(Branch::ThreeD, 1.0, 224, 16),
        [[64, 16, 56, 56], [128, 8, 28, 28], [256, 4, 14, 14], [512, 2, 7, 7]]
    );
}

#[test]
fn planar_taps_at_full_resolution() {
    let s = shape_suite(Branch::TwoD, 1.0, 224, 1);
    assert!(s.shapes_match(), "taps {:?}, expected {:?}", s.taps, s.expected);
    assert!(s.max_mass_err <= 1e-5, "attention mass off by {:e}", s.max_mass_err);
}

#[test]
fn volumetric_taps_at_full_resolution() {
    let s = shape_suite(Branch::ThreeD, 1.0, 224, 16);
    assert!(s.shapes_match(), "taps {:?}, expected {:?}", s.taps, s.expected);
    assert_eq!(s.taps[7], [1, 512, 2, 7, 7]);
    assert!(s.max_mass_err <= 1e-5, "attention mass off by {:e}", s.max_mass_err);
}

#[test]
fn narrow_and_small_inputs_follow_the_same_bookkeeping() {
    for (branch, size, depth) in [(Branch::TwoD, 40, 1), (Branch::TwoD, 33, 1), (Branch::ThreeD, 40, 8), (Branch::ThreeD, 48, 12)] {
        let s = shape_suite(branch, 0.25, size, depth);
        assert!(s.shapes_match(), "{branch:?} {size} {depth}: {:?} vs {:?}", s.taps, s.expected);
        assert!(s.max_mass_err <= 1e-5);
    }
}
