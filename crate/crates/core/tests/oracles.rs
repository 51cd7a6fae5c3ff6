mod common;

use common::oracle;

const TOL: f64 = 1e-12;

#[test]
fn attention_scores_match_loop() {
    assert!(oracle::attention_scores() <= TOL);
}

#[test]
fn class_logits_match_loop() {
    assert!(oracle::class_logits() <= TOL);
}

#[test]
fn batch_prototypes_match_loop() {
    assert!(oracle::batch_prototypes() <= TOL);
}

#[test]
fn pool_initialization_matches_loop() {
    assert!(oracle::pool_initialization() <= 1e-10);
}

#[test]
fn similarity_sets_match_brute_force() {
    assert_eq!(oracle::similarity_sets(), 0.0);
}

#[test]
fn attribute_reweight_matches_loop() {
    assert!(oracle::attribute_reweight_check() <= TOL);
}

#[test]
fn predictions_agree_with_recomputed_logits() {
    assert_eq!(oracle::predictions(), 0.0);
}

#[test]
fn activation_maps_match_finite_differences() {
    assert!(oracle::activation_maps() < 1e-6);
}

#[test]
fn uad_loss_matches_loop() {
    assert!(oracle::uad_loss() <= TOL);
}
