use lvat_core::gradcheck::{self, TOLERANCE};

#[test]
fn every_registered_graph_matches_finite_differences() {
    let reports = gradcheck::run(None).unwrap();
    for r in &reports {
        println!("{:<32} {:>5} {:.3e}", r.name, r.elements, r.max_rel_err);
    }
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed).collect();
    assert!(failed.is_empty(), "above {TOLERANCE}: {failed:?}");
}

#[test]
fn corrupting_an_end_to_end_graph_fails_it() {
    let reports = gradcheck::run(Some("lvat_cost (flow) final pass")).unwrap();
    let bad: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    assert_eq!(bad, vec!["lvat_cost (flow) final pass"]);
}
