mod common;

use common::checks::*;

const INSTANCES: u64 = 20;

fn worst(case: fn(u64) -> f64) -> f64 {
    (0..INSTANCES).map(case).fold(0.0, f64::max)
}

#[test]
fn gcn_layer_matches_finite_differences() {
    let e = worst(gcn_case);
    assert!(e <= 1e-4, "relative error {e:e}");
}

#[test]
fn global_head_matches_finite_differences() {
    let e = worst(global_head_case);
    assert!(e <= 1e-4, "relative error {e:e}");
}

#[test]
fn local_head_matches_finite_differences() {
    let e = worst(local_head_case);
    assert!(e <= 1e-4, "relative error {e:e}");
}

#[test]
fn feature_provider_matches_finite_differences() {
    let e = worst(feature_case);
    assert!(e <= 1e-4, "relative error {e:e}");
}

#[test]
fn tiny_decoder_matches_finite_differences() {
    let e = worst(decoder_case);
    assert!(e <= 1e-3, "relative error {e:e}");
}
