use std::fs;

use mmfl_core::config::ExperimentConfig;
use mmfl_core::harness::{config_hash, Manifest};
use mmfl_core::*;

fn small_config(out: &std::path::Path, rounds: usize) -> ExperimentConfig {
    let json = serde_json::json!({
        "num_classes": 2,
        "data": {"kind": "synthetic", "scale": 1, "modalities": {
            "mrna": {"dim": 8, "signal": 1.0, "noise": 1.0},
            "image": {"dim": 10, "signal": 1.0, "noise": 1.0},
            "clinical": {"dim": 4, "signal": 1.0, "noise": 1.0}}},
        "partition": {"points_per_institution": 16},
        "mode": "dgb-pcw",
        "rounds": rounds,
        "local_steps": 3,
        "batch_size": 4,
        "eta0": 0.05,
        "seed": 11,
        "out_dir": out,
    });
    ExperimentConfig::from_json(&json.to_string()).unwrap()
}

#[test]
fn three_rounds_seven_combos() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 3);
    let (run, run_dir) = run_and_export(&cfg, None).unwrap();
    let rounds = fs::read_to_string(run_dir.join("rounds.csv")).unwrap();
    assert_eq!(rounds.lines().count(), 1 + 21);
    let inst = fs::read_to_string(run_dir.join("institutions.csv")).unwrap();
    assert_eq!(inst.lines().count(), 1 + 3 * 21);
    let global = fs::read_to_string(run_dir.join("global.csv")).unwrap();
    assert_eq!(global.lines().count(), 1 + 3);
    let header = global.lines().next().unwrap();
    for c in ["BRCA", "LUSC", "LIHC"] {
        assert!(header.contains(&format!("accuracy:{c}")), "{header}");
    }

    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(run_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.rounds, 3);
    assert_eq!(manifest.seed, 11);
    assert_eq!(manifest.best_round, best_round(&run.records));
    assert_eq!(manifest.config_hash, config_hash(&cfg.to_json()));

    assert_eq!(read_metrics(&run_dir).unwrap(), run.records);
}

#[test]
fn export_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 2);
    let run = run_experiment(&cfg, None).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    export_metrics(&run, &cfg.to_json(), &a).unwrap();
    export_metrics(&run, &cfg.to_json(), &b).unwrap();
    for name in ["rounds.csv", "institutions.csv", "global.csv", "combo_eval.csv", "manifest.json", "final_model.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn hash_tracks_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 2);
    let same = small_config(dir.path(), 2);
    let other = small_config(dir.path(), 3);
    assert_eq!(config_hash(&cfg.to_json()), config_hash(&same.to_json()));
    assert_ne!(config_hash(&cfg.to_json()), config_hash(&other.to_json()));
}

#[test]
fn final_model_predicts_on_test_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 2);
    let run = run_experiment(&cfg, None).unwrap();
    let full = ModalityCombination::new(run.universe.clone()).unwrap();
    let net = run.final_model.network(&full).unwrap();
    let prepared = cfg.prepare().unwrap();
    let eval = harness::evaluate_net(&net, &prepared.test.points).unwrap();
    let last = run.records.last().unwrap();
    assert!((eval.accuracy - last.global.accuracy).abs() < 1e-8);
}
