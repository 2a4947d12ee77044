use mapdistill_core::audit::{audit_operation, OPERATIONS, TOLERANCE};

#[test]
fn every_operation_matches_central_differences() {
    for &op in OPERATIONS {
        let r = audit_operation(op, 20, 7).unwrap();
        assert!(r.passed(), "{op}: max relative error {} at instance {}", r.max_rel_error, r.worst_instance);
        assert!(r.coordinates > 0, "{op}: nothing checked");
    }
    assert!(TOLERANCE <= 1e-4);
}

#[test]
fn unknown_operation_is_a_config_error() {
    assert!(audit_operation("no_such_op", 1, 0).is_err());
}
