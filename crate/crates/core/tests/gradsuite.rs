use std::time::Instant;

use mscm::gradsuite::{check_once, run_check, run_suite, SuiteOptions, CHECKS};
use mscm::tensor::Fault;

#[test]
fn stock_suite_passes() {
    let start = Instant::now();
    let results = run_suite(&SuiteOptions::default()).unwrap();
    assert_eq!(results.len(), CHECKS.len());
    for r in &results {
        println!("{r}");
    }
    let failed: Vec<_> = results.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    assert!(failed.is_empty(), "{failed:?}");
    println!("elapsed {:?}", start.elapsed());
}

#[test]
fn conv_fault_is_caught() {
    let opts = SuiteOptions {
        seeds: 2,
        fault: Some(Fault::Conv2dBackward),
        ..SuiteOptions::default()
    };
    assert!(!run_check("conv2d", &opts).unwrap().passed());
    assert!(run_check("softmax", &opts).unwrap().passed());
}

#[test]
fn tight_tolerance_fails() {
    let opts = SuiteOptions {
        seeds: 2,
        tol: 1e-9,
        ..SuiteOptions::default()
    };
    assert!(!run_check("conv2d", &opts).unwrap().passed());
}

#[test]
fn checks_are_deterministic() {
    let opts = SuiteOptions::default();
    for name in ["alb", "l_total", "matmul"] {
        let a = check_once(name, 3, &opts).unwrap();
        let b = check_once(name, 3, &opts).unwrap();
        assert_eq!(a.max_rel_err.to_bits(), b.max_rel_err.to_bits());
    }
}

#[test]
fn unknown_check_is_an_error() {
    assert!(check_once("nope", 0, &SuiteOptions::default()).is_err());
}
