mod common;

#[test]
fn every_primitive_matches_finite_differences() {
    let mut failures = Vec::new();
    for (i, case) in common::primitive_cases().iter().enumerate() {
        let worst = common::check_primitive(case, 100, 1000 + i as u64);
        println!("{:<30} max rel err {worst:.3e}", case.name);
        if !(worst < 1e-4) {
            failures.push((case.name, worst));
        }
    }
    assert!(failures.is_empty(), "{failures:?}");
}
