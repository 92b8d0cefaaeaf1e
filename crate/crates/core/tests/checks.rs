use cats_core::checks::{run_suite, CheckOptions, Suite};

#[test]
fn every_suite_passes() {
    for suite in Suite::ALL {
        let r = run_suite(suite, CheckOptions::default());
        assert!(r.passed(), "{}", r.render());
        assert!(r.render().contains(&format!("suite {suite}:")));
    }
}

#[test]
fn injected_faults_are_caught() {
    for suite in Suite::ALL {
        let r = run_suite(suite, CheckOptions { inject_fault: true });
        assert!(!r.passed(), "{suite} did not notice the fault:\n{}", r.render());
    }
    let r = run_suite(Suite::Geometry, CheckOptions { inject_fault: true });
    assert!(!r.get("shift_mask_oracle").unwrap().passed);
}

#[test]
fn suite_names_parse() {
    for suite in Suite::ALL {
        assert_eq!(suite.as_str().parse::<Suite>().unwrap(), suite);
    }
    assert_eq!("nope".parse::<Suite>().unwrap_err().kind(), "config");
}
