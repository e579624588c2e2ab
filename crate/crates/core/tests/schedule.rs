//! The engine's stage sequence against a literal simulation of the
//! prune / flag / grow trigger chain.

mod support;

#[test]
fn stage_sequence_matches_the_trigger_chain_on_random_configs() {
    assert_eq!(support::schedule::schedule_mismatches(1000, 1), 0);
}
