//! Config parsing and serialisation over generated and shipped files.

use std::path::PathBuf;

use iee_harness::config::{load_config, parse_config, ExperimentConfig};
use proptest::prelude::*;

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn round_trips(cfg: &ExperimentConfig) -> bool {
    parse_config(&cfg.to_toml()).map_or(false, |back| &back == cfg)
}

proptest! {
    #[test]
    fn generated_configs_round_trip(
        strategy in prop::sample::select(vec!["iee", "rigl", "set", "static"]),
        grow_init in prop::sample::select(vec!["mru", "zero"]),
        grow_rule in prop::sample::select(vec!["criterion", "random"]),
        h in 1u64..300, j in 0u64..300, q in 0u64..300,
        sparsity in 0.05f64..0.99,
        freeze in any::<bool>(),
        hidden in prop::collection::vec(1usize..512, 1..4),
        seeds in prop::collection::vec(0u64..100, 1..5),
        epochs in 1usize..50,
        lr in 0.001f32..1.0,
    ) {
        let text = format!(
            "seeds = {seeds:?}\n[model]\nkind = \"mlp\"\nhidden = {hidden:?}\n\
             [plan]\nsparsity = {sparsity}\n\
             [schedule]\nstrategy = \"{strategy}\"\nh = {h}\nj = {j}\nq = {q}\nfreeze = {freeze}\n\
             grow_init = \"{grow_init}\"\ngrow_rule = \"{grow_rule}\"\n\
             [optimizer]\nepochs = {epochs}\nlr = {lr}\n\
             [data]\nkind = \"synthetic\"\n"
        );
        let cfg = parse_config(&text).unwrap();
        prop_assert_eq!(cfg.schedule.h, h);
        prop_assert_eq!(&cfg.model.hidden, &hidden);
        prop_assert_eq!(cfg.plan.sparsity, sparsity);
        prop_assert!(round_trips(&cfg));
    }
}

#[test]
fn shipped_configs_load_validate_and_round_trip() {
    let mut seen = 0;
    for entry in std::fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().to_string();
        if !name.ends_with(".toml") || name.contains("grid") {
            continue;
        }
        let cfg = load_config(&path).unwrap_or_else(|e| panic!("{name}: {e}"));
        cfg.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(round_trips(&cfg), "{name}");
        seen += 1;
    }
    assert!(seen >= 4);
}

#[test]
fn unknown_field_is_rejected_with_its_name() {
    let err = parse_config("[model]\nkind = \"mlp\"\nwidth = 3\n[data]\nkind = \"synthetic\"\n").unwrap_err();
    assert!(err.to_string().contains("width"), "{err}");
}

#[test]
fn out_of_range_sparsity_fails_validation() {
    let err = parse_config("[model]\nkind = \"mlp\"\n[plan]\nsparsity = 1.5\n[data]\nkind = \"synthetic\"\n")
        .and_then(|c| c.validate())
        .unwrap_err();
    assert!(err.to_string().contains("sparsity"), "{err}");
}
