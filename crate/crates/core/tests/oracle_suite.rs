use cdkd::oracle::suite::{gradient_checks, run_suite, summarize, value_checks, SuiteConfig};

#[test]
fn gradient_checks_cover_every_op_with_twenty_cases() {
    let reports = gradient_checks(SuiteConfig::default().seed, 20).unwrap();
    let fams = summarize(&reports);
    for f in &fams {
        assert!(f.cases >= 20, "{} has {} cases", f.family, f.cases);
        assert_eq!(f.failures, 0, "{f:?}");
    }
    for op in [
        "add", "sub", "mul", "mul_scalar", "scale", "relu", "log", "square", "sum", "mean", "sum_rows", "matmul",
        "add_bias", "conv2d", "global_avg_pool", "softmax", "cd", "kd", "gkd", "ce", "total",
    ] {
        assert!(fams.iter().any(|f| f.family == format!("grad/{op}")), "missing grad/{op}");
    }
}

#[test]
fn engine_matches_loop_oracles_on_fifty_cases() {
    let reports = value_checks(3, 50).unwrap();
    let fams = summarize(&reports);
    assert_eq!(fams.len(), 7);
    for f in &fams {
        assert_eq!(f.cases, 50);
        assert_eq!(f.failures, 0, "{f:?}");
        assert!(f.worst_rel <= 1e-5);
    }
}

#[test]
fn suite_is_deterministic() {
    let cfg = SuiteConfig {
        seed: 4,
        grad_cases: 1,
        value_cases: 2,
    };
    assert_eq!(run_suite(&cfg).unwrap(), run_suite(&cfg).unwrap());
}
