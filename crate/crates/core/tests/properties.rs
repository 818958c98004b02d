mod support;

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tapes::components::standard_components;
use tapes::scenario;
use tapes::tape::codec::{deserialize, serialize};
use tapes::tape::{diff, DecodeMode, StepRegistry, Tape};

use support::{mutate, oracle_agent, reference_active, sequence, tape};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn tapes_round_trip_exactly(tape in tape()) {
        let bytes = serialize(&tape);
        let back = deserialize(&StepRegistry::default(), &bytes, DecodeMode::Strict).unwrap();
        prop_assert_eq!(&back, &tape);
        prop_assert_eq!(serialize(&back), bytes);
    }

    #[test]
    fn a_tape_has_no_diff_with_itself(tape in tape()) {
        prop_assert!(diff(&tape, &tape).is_empty());
    }

    #[test]
    fn a_single_mutation_is_found_where_it_was_made(tape in tape(), pick in any::<prop::sample::Index>()) {
        prop_assume!(!tape.is_empty());
        let k = pick.index(tape.len());
        let mut steps = tape.steps().to_vec();
        mutate(&mut steps[k]);
        let mutated = Tape::from_parts(steps, tape.metadata().clone()).unwrap();
        let report = diff(&tape, &mutated);
        prop_assert_eq!(report.first_difference(), Some(k));
        prop_assert!(report.differences().all(|e| e.index() == k));
    }
}

#[test]
fn golden_fixture_is_byte_stable() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/golden_tape.json");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(path, serialize(&scenario::golden_tape())).unwrap();
    }
    let stored = std::fs::read(path).unwrap();
    assert_eq!(serialize(&scenario::golden_tape()), stored);
    let mut registry = StepRegistry::default();
    registry.register(tapes::components::dialog::thought_kind()).unwrap();
    let decoded = deserialize(&registry, &stored, DecodeMode::Strict).unwrap();
    assert_eq!(serialize(&decoded), stored);
}

#[test]
fn active_agent_matches_a_stack_interpreter() {
    let started = std::time::Instant::now();
    let agent = oracle_agent();
    let mut compared = 0;
    for seed in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = rng.gen_range(0..30);
        let steps = sequence(&mut rng, len);
        for end in 0..=steps.len() {
            let prefix = &steps[..end];
            assert_eq!(agent.active_agent(prefix).unwrap(), reference_active(prefix), "seed {seed} prefix {end}");
            compared += 1;
        }
    }
    assert!(compared > 1000);
    assert!(started.elapsed().as_secs() < 5, "{:?}", started.elapsed());
}

#[test]
fn views_follow_the_delegation() {
    let agent = standard_components().build(&scenario::analyst_config(), None).unwrap();
    let tape = scenario::delegation_tape();
    assert_eq!(tape.len(), 20);

    let during = agent.view_stack(&tape.steps()[..17]).unwrap();
    assert_eq!(during.depth(), 2);
    assert_eq!(during.active_path(), "analyst/search_agent");
    assert_eq!(during.top().visible, (9..17).collect::<Vec<_>>());

    let after = agent.view_stack(tape.steps()).unwrap();
    assert_eq!(after.depth(), 1);
    assert_eq!(after.active_path(), "analyst");
    let expected: Vec<usize> = (0..=9).chain([19]).collect();
    assert_eq!(after.top().visible, expected);
    let by_kind: BTreeMap<usize, &str> = after.top().visible.iter().map(|&i| (i, tape[i].kind.as_str())).collect();
    assert_eq!(by_kind[&19], "respond");
}
