mod common;

use common::{model_gradient_errors, op_gradient_errors, GRAD_TOL};

fn assert_within(errors: &[(String, f64)]) {
    let bad: Vec<_> = errors
        .iter()
        .filter(|(_, e)| e.is_nan() || *e >= GRAD_TOL)
        .collect();
    assert!(bad.is_empty(), "gradient errors above {GRAD_TOL}: {bad:?}");
}

#[test]
fn every_operation_matches_finite_differences() {
    let errors = op_gradient_errors();
    assert!(errors.len() >= 40);
    assert_within(&errors);
}

#[test]
fn two_layer_interface_with_combined_loss_matches_finite_differences() {
    let errors = model_gradient_errors();
    for (task, e) in &errors {
        eprintln!("{task}: {e:.3e}");
    }
    assert_within(&errors);
}
