use mmvl_core::tensor::OpKind;
use mmvl_core::verify::{check_objectives, check_primitives, run_verify, VerifyConfig};

#[test]
fn fresh_checkout_passes_every_check() {
    let report = run_verify(&VerifyConfig::default(), None).unwrap();
    for c in &report.checks {
        println!("{:<48} {} measured {:.3e} tol {:.3e}  {}", c.name, if c.passed { "PASS" } else { "FAIL" }, c.measured, c.tolerance, c.detail);
    }
    assert!(report.passed);
    assert!(report.checks.iter().all(|c| c.measured.is_finite() && !c.detail.is_empty()));
}

#[test]
fn corrupted_rule_fails_its_gradient_check() {
    let _g = mmvl_core::tensor::fault::inject(OpKind::Exp);
    let checks = check_primitives(0).unwrap();
    let exp = checks.iter().find(|c| c.name == "fd.primitive.exp").unwrap();
    assert!(!exp.passed, "{exp:?}");
    let add = checks.iter().find(|c| c.name == "fd.primitive.add").unwrap();
    assert!(add.passed);
}

#[test]
fn corrupted_matmul_fails_objective_checks() {
    let _g = mmvl_core::tensor::fault::inject(OpKind::MatMul);
    assert!(check_objectives(0).unwrap().iter().all(|c| !c.passed));
}

#[test]
fn fault_is_cleared_after_the_run() {
    let report = run_verify(&VerifyConfig { sandwich_replicates: 20, variance_replicates: 50, ..Default::default() }, Some(OpKind::Log)).unwrap();
    assert!(!report.passed);
    assert!(check_primitives(0).unwrap().iter().all(|c| c.passed));
}
