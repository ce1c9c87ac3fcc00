use std::time::Instant;

use capsroute::gradcheck::{registry, run_suite, GradCheckConfig};

#[test]
fn full_suite_passes_at_f64() {
    let cfg = GradCheckConfig::default();
    let start = Instant::now();
    let reports = run_suite(&cfg, None).unwrap();
    for r in &reports {
        println!("{:<28} max_rel_error={:.3e} probes={}", r.op_name, r.max_rel_error, r.probe_count);
    }
    println!("elapsed {:?}", start.elapsed());
    assert!(reports.iter().all(|r| r.passed()));
}

#[test]
fn every_op_reported_once() {
    let names: Vec<String> = registry(0).unwrap().iter().map(|op| op.name().to_string()).collect();
    let mut sorted = names.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), names.len());
    assert!(names.iter().any(|n| n == "mnist_total_loss"));
}

#[test]
fn injected_fault_is_caught() {
    let reports = run_suite(&GradCheckConfig::default(), Some("caps_dense")).unwrap();
    let bad: Vec<_> = reports.iter().filter(|r| !r.passed()).map(|r| r.op_name.as_str()).collect();
    assert_eq!(bad, vec!["caps_dense"]);
    assert!(run_suite(&GradCheckConfig::default(), Some("no_such_op")).is_err());
}
