//! Harness plumbing: stage caching, artifact stamping, map rendering, and
//! failure reporting, exercised on a deliberately small configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use reramlab::defects::{build_mask, Pattern};
use reramlab::netlist::parse_netlist;
use reramlab::pipeline::{ExperimentConfig, MapFormat, MapQuantity, Pipeline};
use reramlab::report::bytes_hash;

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .canonicalize()
        .expect("workspace root")
}

/// A few-second configuration: tiny hidden layer, a handful of epochs, the
/// acceptance gate disabled, one defect, a two-point sweep, two corrector
/// rates.
fn small_config(master_seed: u64) -> ExperimentConfig {
    let data = workspace_root().join("data/optdigits.csv");
    let text = format!(
        r#"{{
        "schema_version": 1,
        "dataset": {{"path": {data:?}, "n_train": 300}},
        "train": {{
            "hidden": [12], "epochs": 4, "batch_size": 32,
            "learning_rate": 0.05, "momentum": 0.9, "dropout_rate": 0.0,
            "min_test_accuracy": 0.0, "max_seed_retries": 0
        }},
        "defects": [
            {{"target_array": 0, "pattern": {{"type": "circular", "r": 0.3}}, "mode": "stuck_off"}},
            {{"target_array": 0, "pattern": {{"type": "row", "start": 2, "count": 3}}, "mode": "stuck_on"}}
        ],
        "sweep": {{
            "target_array": 0,
            "families": ["circular", "row"],
            "target_pair_counts": [0, 40],
            "modes": [{{"mode": "stuck_on"}}, {{"mode": "stuck_off"}}]
        }},
        "corrector": {{
            "hidden": [8], "epochs": 5, "batch_size": 64,
            "learning_rate": 0.05, "momentum": 0.9,
            "dropout_rates": [0.0, 0.1], "defect_index": 0
        }},
        "master_seed": {master_seed}
    }}"#,
        data = data.to_string_lossy()
    );
    serde_json::from_str(&text).expect("small config parses")
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_path_buf();
                files.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    files
}

fn run(config: ExperimentConfig, dir: &Path) -> reramlab::RunManifest {
    let mut p = Pipeline::new(config, dir).unwrap();
    p.run().unwrap();
    p.finish().unwrap()
}

#[test]
fn rerun_hits_every_stage_and_reproduces_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let first = run(small_config(3), tmp.path());
    assert!(first.cache_hits.is_empty(), "first run computes everything");
    let before = snapshot(tmp.path());
    let second = run(small_config(3), tmp.path());
    for stage in ["train", "map", "inject-0", "inject-1", "infer", "sweep", "correct"] {
        assert!(
            second.cache_hits.iter().any(|s| s == stage),
            "stage {stage} should be cached, hits: {:?}",
            second.cache_hits
        );
    }
    let after = snapshot(tmp.path());
    for (rel, bytes) in &before {
        if rel == Path::new("manifest.json") {
            continue; // timings differ by design
        }
        assert_eq!(
            Some(bytes),
            after.get(rel),
            "{} changed across a cached rerun",
            rel.display()
        );
    }
    // Same artifact inventory, same content hashes.
    let inv = |m: &reramlab::RunManifest| {
        let mut v: Vec<(String, String)> = m
            .artifacts
            .iter()
            .map(|a| (a.path.clone(), a.hash.clone()))
            .collect();
        v.sort();
        v.dedup();
        v
    };
    assert_eq!(inv(&first), inv(&second));
}

#[test]
fn changed_seed_invalidates_the_cache() {
    let tmp = tempfile::tempdir().unwrap();
    let first = run(small_config(3), tmp.path());
    let second = run(small_config(4), tmp.path());
    assert!(second.cache_hits.is_empty(), "new seed recomputes everything");
    assert_ne!(first.config_hash, second.config_hash);
    let model_hash = |m: &reramlab::RunManifest| m.artifact("train", "model.json").unwrap().hash.clone();
    assert_ne!(model_hash(&first), model_hash(&second));
}

#[test]
fn deleted_artifact_forces_recompute_with_identical_content() {
    let tmp = tempfile::tempdir().unwrap();
    run(small_config(3), tmp.path());
    let stack_path = tmp.path().join("stack.json");
    let original = std::fs::read(&stack_path).unwrap();
    std::fs::remove_file(&stack_path).unwrap();
    let second = run(small_config(3), tmp.path());
    assert!(
        !second.cache_hits.iter().any(|s| s == "map"),
        "map must recompute once its artifact is gone"
    );
    assert_eq!(std::fs::read(&stack_path).unwrap(), original);
}

#[test]
fn every_artifact_exists_and_carries_the_config_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let mut p = Pipeline::new(small_config(3), tmp.path()).unwrap();
    p.run().unwrap();
    p.export_map(0, MapQuantity::Gap, MapFormat::Both, None).unwrap();
    p.export_map(0, MapQuantity::DefectMask, MapFormat::Both, Some(0)).unwrap();
    p.export_netlist_file(Some(0)).unwrap();
    let manifest = p.finish().unwrap();
    let tag = format!("config_hash={}", manifest.config_hash);
    // Compact and pretty serializations differ in colon spacing.
    let quoted = format!("\"config_hash\":\"{}\"", manifest.config_hash);
    let quoted_pretty = format!("\"config_hash\": \"{}\"", manifest.config_hash);
    assert!(!manifest.artifacts.is_empty());
    for artifact in &manifest.artifacts {
        let path = tmp.path().join(&artifact.path);
        let bytes = std::fs::read(&path)
            .unwrap_or_else(|_| panic!("{} listed but missing", artifact.path));
        assert_eq!(bytes_hash(&bytes), artifact.hash, "{} hash drifted", artifact.path);
        let text = String::from_utf8_lossy(&bytes);
        let stamped = match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => text.starts_with(&format!("# {tag}")),
            Some("json") => text.contains(&quoted) || text.contains(&quoted_pretty),
            Some("pgm") => text.lines().nth(1) == Some(&format!("# {tag}")),
            Some("sp") => text.starts_with(&format!("* {tag}")),
            other => panic!("unexpected artifact type {other:?} at {}", artifact.path),
        };
        assert!(stamped, "{} does not carry the config hash", artifact.path);
    }
}

#[test]
fn gap_map_reflects_device_physics() {
    let tmp = tempfile::tempdir().unwrap();
    let mut p = Pipeline::new(small_config(3), tmp.path()).unwrap();
    p.ensure_stack().unwrap();
    // Defect 1 is a stuck-on row band: those cells must render at the
    // minimum gap; everything else stays inside the calibrated range.
    let written = p
        .export_map(0, MapQuantity::Gap, MapFormat::Csv, Some(1))
        .unwrap();
    let csv = std::fs::read_to_string(&written[0]).unwrap();
    let grid: Vec<Vec<f64>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(grid.len(), 65);
    let mask = build_mask(&Pattern::Row { start: 2, count: 3 }, 65, 12).unwrap();
    for (i, row) in grid.iter().enumerate() {
        assert_eq!(row.len(), 12);
        for (j, &gap) in row.iter().enumerate() {
            assert!((0.2..=1.7).contains(&gap), "gap {gap} outside device range");
            if mask.is_defective(i, j) {
                assert_eq!(gap, 0.2, "stuck-on cell ({i},{j}) must sit at minimum gap");
            }
        }
    }

    // Stuck-off cells hold zero conductance on both physical devices.
    let written = p
        .export_map(0, MapQuantity::GPlus, MapFormat::Csv, Some(0))
        .unwrap();
    let csv = std::fs::read_to_string(&written[0]).unwrap();
    let mask = build_mask(&Pattern::Circular { r: 0.3 }, 65, 12).unwrap();
    for (i, line) in csv.lines().skip(1).enumerate() {
        for (j, v) in line.split(',').enumerate() {
            let g: f64 = v.parse().unwrap();
            if mask.is_defective(i, j) {
                assert_eq!(g, 0.0);
            } else {
                assert!(g > 0.0);
            }
        }
    }
}

#[test]
fn defect_mask_map_matches_mask_builder_cell_for_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let mut p = Pipeline::new(small_config(3), tmp.path()).unwrap();
    p.ensure_stack().unwrap();
    let written = p
        .export_map(0, MapQuantity::DefectMask, MapFormat::Both, Some(0))
        .unwrap();
    let mask = build_mask(&Pattern::Circular { r: 0.3 }, 65, 12).unwrap();
    let csv = std::fs::read_to_string(&written[0]).unwrap();
    for (i, line) in csv.lines().skip(1).enumerate() {
        for (j, v) in line.split(',').enumerate() {
            let expect = if mask.is_defective(i, j) { "1" } else { "0" };
            assert_eq!(v, expect, "cell ({i},{j})");
        }
    }
    let pgm = std::fs::read_to_string(&written[1]).unwrap();
    let mut lines = pgm.lines().peekable();
    assert_eq!(lines.next(), Some("P2"));
    while lines.peek().is_some_and(|l| l.starts_with('#')) {
        lines.next();
    }
    assert_eq!(lines.next(), Some("12 65"));
    assert_eq!(lines.next(), Some("255"));
    let pixels: Vec<u32> = lines
        .flat_map(|l| l.split_whitespace().map(|v| v.parse().unwrap()))
        .collect();
    assert_eq!(pixels.len(), 65 * 12);
    for (k, &px) in pixels.iter().enumerate() {
        let (i, j) = (k / 12, k % 12);
        assert_eq!(px == 255, mask.is_defective(i, j));
        assert!(px == 0 || px == 255);
    }
}

#[test]
fn netlist_gains_open_stubs_under_stuck_off() {
    let tmp = tempfile::tempdir().unwrap();
    let mut p = Pipeline::new(small_config(3), tmp.path()).unwrap();
    p.ensure_stack().unwrap();
    let clean = p.export_netlist_file(None).unwrap();
    let faulty = p.export_netlist_file(Some(0)).unwrap();
    let clean_text = std::fs::read_to_string(clean).unwrap();
    let faulty_text = std::fs::read_to_string(faulty).unwrap();
    let clean_parsed = parse_netlist(&clean_text).unwrap();
    let faulty_parsed = parse_netlist(&faulty_text).unwrap();
    assert_eq!(clean_parsed.open_stubs, 0);
    let defective = build_mask(&Pattern::Circular { r: 0.3 }, 65, 12).unwrap().pair_count();
    assert_eq!(faulty_parsed.open_stubs, 2 * defective);
    // Total device sites are preserved: each stuck-off resistor reappears
    // as an open stub.
    assert_eq!(faulty_parsed.device_elements(), clean_parsed.device_elements());
    assert_eq!(
        faulty_parsed.resistor_elements,
        clean_parsed.resistor_elements - 2 * defective
    );
}

#[test]
fn stage_errors_name_the_failing_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = small_config(3);
    config.dataset.path = "/nonexistent/corpus.csv".into();
    let mut p = Pipeline::new(config, tmp.path()).unwrap();
    let err = p.run().unwrap_err().to_string();
    assert!(err.contains("dataset"), "error should name the stage: {err}");
}

#[test]
fn corrector_defect_index_out_of_range_is_rejected_up_front() {
    let mut config = small_config(3);
    config.defects.clear();
    if let Some(c) = &mut config.corrector {
        c.defect_index = Some(2);
    }
    let tmp = tempfile::tempdir().unwrap();
    assert!(Pipeline::new(config, tmp.path()).is_err());
}
