// SPDX-License-Identifier: Apache-2.0

//! Each disabled protection is caught by the invariant that guards it,
//! and by no other.

use fasco_core::harness::suite::{expected_failures, run_suite, Scale, SuiteConfig};
use fasco_core::rmm::Mutation;

fn failing_under(mutation: Option<Mutation>) -> Vec<String> {
    let config = SuiteConfig {
        seed: 3,
        mutation,
        scale: Scale::QUICK,
    };
    run_suite(&config).unwrap().failing().into_iter().collect()
}

#[test]
fn clean_suite_passes() {
    assert!(failing_under(None).is_empty());
}

#[test]
fn every_mutation_fails_exactly_its_invariants() {
    let mut wrong = Vec::new();
    for m in Mutation::all() {
        let expected: Vec<String> = expected_failures(Some(m))
            .into_iter()
            .map(String::from)
            .collect();
        assert!(!expected.is_empty(), "{m} has no guarding invariant");
        let got = failing_under(Some(m));
        if got != expected {
            wrong.push(format!("{m}: expected {expected:?}, got {got:?}"));
        }
    }
    assert!(wrong.is_empty(), "{}", wrong.join("\n"));
}
