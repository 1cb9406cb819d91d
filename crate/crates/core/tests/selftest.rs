use tt_core::selftest::run_all;
use tt_core::transducer::set_recursion_fault;

#[test]
fn pristine_suites_pass() {
    let results = run_all();
    let names: Vec<&str> = results.iter().map(|r| r.name).collect();
    assert_eq!(names, ["oracle", "gradcheck", "streaming", "schedule"]);
    for r in &results {
        assert!(r.passed, "{r}");
    }
}

#[test]
fn perturbed_recursion_fails_the_oracle_suite() {
    set_recursion_fault(true);
    let results = run_all();
    set_recursion_fault(false);
    let oracle = results.iter().find(|r| r.name == "oracle").unwrap();
    assert!(!oracle.passed, "{oracle}");
    assert!(oracle.to_string().starts_with("FAIL  oracle"));
}
