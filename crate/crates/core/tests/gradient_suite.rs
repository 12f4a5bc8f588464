use hodinet_core::gradcheck::suite;

#[test]
fn every_component_passes() {
    let reports = suite(0).unwrap();
    assert!(reports.len() >= 10);
    for r in &reports {
        assert!(r.passed(), "{r:?}");
    }
}
