use avtag::verify::{gradient_suite, GRADIENT_TOLERANCE};

#[test]
fn every_layer_matches_central_differences() {
    for seed in [0, 1] {
        let suite = gradient_suite(seed).unwrap();
        let names: Vec<&str> = suite.iter().map(|(n, _)| n.as_str()).collect();
        for expected in ["embedding", "lstm", "bilstm", "attention", "crf-nll", "opentag"] {
            assert!(names.contains(&expected), "{expected} missing from {names:?}");
        }
        for (name, report) in &suite {
            assert!(report.checked > 0, "{name}");
            assert!(
                report.max_rel_error < GRADIENT_TOLERANCE,
                "{name}: relative error {} at {:?}",
                report.max_rel_error,
                report.worst
            );
        }
    }
}
