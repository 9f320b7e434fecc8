use scq_core::autodiff::set_corrupted_op;
use scq_core::gradcheck::{failing, run_suite, Suite};

#[test]
fn full_suite_passes_on_default_seed() {
    let reports = run_suite(Suite::All, 0).unwrap();
    for r in &reports {
        println!("{r}");
    }
    assert!(failing(&reports).is_empty(), "failing: {:?}", failing(&reports));
}

#[test]
fn corrupted_rule_is_caught_and_named() {
    set_corrupted_op(Some("simplex_project"));
    let reports = run_suite(Suite::Quantizers, 0);
    set_corrupted_op(None);
    let failed = failing(&reports.unwrap());
    assert!(failed.contains(&"simplex_project"), "{failed:?}");
    assert!(failed.contains(&"scq_fast"), "{failed:?}");
    assert!(!failed.contains(&"sq_dist"));
}
