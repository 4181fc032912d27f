use spdgan_core::gradcheck::{self, Scope, DEFAULT_SEEDS, TOLERANCE};
use spdgan_core::Fault;

#[test]
fn every_suite_passes_over_five_seeds() {
    let report = gradcheck::run(None, &DEFAULT_SEEDS, None);
    for line in report.lines() {
        println!("{line}");
    }
    assert!(report.uncovered.is_empty(), "uncovered: {:?}", report.uncovered);
    assert!(report.passed(), "max relative error {:e}", report.max_rel_error());
}

#[test]
fn corrupted_bimap_backward_is_detected() {
    let suite = gradcheck::find("bimap").expect("registered");
    let clean = suite.run(11, None).unwrap();
    let broken = suite.run(11, Some(Fault::BiMapWeightGrad)).unwrap();
    assert!(clean.max_rel_error < TOLERANCE);
    assert!(broken.max_rel_error > 10.0 * TOLERANCE, "fault went unnoticed: {:e}", broken.max_rel_error);
}

#[test]
fn corruption_propagates_to_network_suite() {
    let suite = gradcheck::find("spd_stack").expect("registered");
    let broken = suite.run(3, Some(Fault::BiMapWeightGrad)).unwrap();
    assert!(broken.max_rel_error > TOLERANCE);
}

#[test]
fn scopes_partition_registry() {
    let all = gradcheck::registry().len();
    let per_scope: usize = [Scope::Layer, Scope::Network, Scope::Loss]
        .iter()
        .map(|&s| gradcheck::registry().iter().filter(|x| x.scope == s).count())
        .sum();
    assert_eq!(all, per_scope);
}
