mod common;

use common::grad_suite::{self, TOL};

fn assert_all(cases: Vec<(String, f64)>) {
    for (name, e) in cases {
        assert!(e < TOL, "{name}: max relative error {e}");
    }
}

#[test]
fn instance_and_bag_losses() {
    for seed in 0..3 {
        assert_all(grad_suite::instance_and_bag(seed));
    }
}

#[test]
fn alignment_terms() {
    for seed in 0..3 {
        assert_all(grad_suite::alignment(seed));
    }
}

#[test]
fn bagcsi_with_fixed_kappa() {
    assert_all(vec![("BagCSI".into(), grad_suite::bagcsi_fixed_kappa())]);
}

#[test]
fn af_target_term_with_embeddings() {
    assert_all(vec![("AF".into(), grad_suite::af_target_term())]);
}

#[test]
fn every_method_objective() {
    assert_all(grad_suite::method_objectives());
}

#[test]
fn adversarial_phases() {
    assert_all(grad_suite::adversarial_phases());
}

#[test]
fn linear_model_instance_loss_is_tight() {
    use llpcs::autodiff::{grad_check, GradCheckOptions};
    use llpcs::losses::instance_mse;
    let c = grad_suite::case(9, &[], &[], false);
    let e = grad_check(
        &c.model,
        |m, t, pv| {
            let f = m.forward(t, pv, &c.batch.source)?;
            instance_mse(t, f.pred, &c.batch.source_labels)
        },
        GradCheckOptions::default(),
    )
    .unwrap()
    .max_rel_error;
    assert!(e < 1e-7, "linear rel err {e}");
}
