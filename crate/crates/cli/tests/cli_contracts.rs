use std::fs;
use std::path::Path;
use std::process::Command;

use biadapt::ablation::{AblationGrid, Variant};
use biadapt::experiment::{EXIT_FAILURE, EXIT_IO};
use biadapt::{parse_config_str, run_ablation, run_experiment, ConfigError, ExperimentSpec, Preset};
use biadapt_core::eval::EvalReport;

const TINY: &str = "\
n_real: 12
n_fake: 12
train_fraction: 0.5
visual_layers: 1
freq_layers: 1
embed_dim: 16
heads: 2
freq_channels: 8
freq_depth: 1
disc_hidden: 8
t1: 1
t2: 1
batch_forward: 4
batch_backward: 4
heatmaps: 1
";

fn tiny(out: &Path) -> ExperimentSpec {
    let mut s = parse_config_str(TINY, Preset::Desk).unwrap();
    s.out_dir = out.to_path_buf();
    s
}

#[test]
fn empty_config_is_the_preset() {
    for p in [Preset::Desk, Preset::PaperParity, Preset::Baseline] {
        assert_eq!(parse_config_str("", p).unwrap(), p.spec());
        assert_eq!(parse_config_str("# nothing\n\n", p).unwrap(), p.spec());
    }
}

#[test]
fn baseline_preset_is_desk_without_alignment() {
    let s = parse_config_str("alpha2: 0\nadapter: none\nout_dir: runs/baseline", Preset::Desk).unwrap();
    assert_eq!(s, Preset::Baseline.spec());
}

#[test]
fn negative_temperature_names_the_key() {
    let err = parse_config_str("tau: -1", Preset::Desk).unwrap_err();
    assert!(matches!(err, ConfigError::Key { ref key, .. } if key == "tau"), "{err:?}");
    let msg = err.to_string();
    assert!(msg.contains("tau") && msg.contains("positive"), "{msg}");
}

#[test]
fn serialized_config_parses_back_to_the_same_spec() {
    let s = tiny(Path::new("somewhere"));
    assert_eq!(parse_config_str(&s.to_config_string(), Preset::PaperParity).unwrap(), s);
}

#[test]
fn experiment_writes_all_stages_and_reruns_identically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run_experiment(&tiny(a.path())).unwrap();
    let rb = run_experiment(&tiny(b.path())).unwrap();
    assert_eq!(ra.reports.len(), 3);
    for stage in ["baseline", "forward", "backward"] {
        let ja = fs::read_to_string(a.path().join(stage).join("report.json")).unwrap();
        let jb = fs::read_to_string(b.path().join(stage).join("report.json")).unwrap();
        assert_eq!(ja, jb, "{stage}");
        assert_eq!(EvalReport::from_json(&ja).unwrap().stage, stage);
        let ca = fs::read(a.path().join(format!("checkpoints/{stage}.ckpt"))).unwrap();
        let cb = fs::read(b.path().join(format!("checkpoints/{stage}.ckpt"))).unwrap();
        assert_eq!(ca, cb, "{stage}");
    }
    assert_eq!(ra.final_state, rb.final_state);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.path().join("manifest.json")).unwrap()).unwrap();
    let cfg = manifest["config"].as_str().unwrap();
    assert_eq!(parse_config_str(cfg, Preset::Desk).unwrap(), tiny(a.path()));

    let again = run_experiment(&tiny(a.path())).unwrap_err();
    assert_eq!(again.exit_code(), EXIT_IO);
    assert_eq!(again.record()["kind"], "overwrite");
}

#[test]
fn ablation_rows_follow_variants() {
    let dir = tempfile::tempdir().unwrap();
    let base = tiny(dir.path());
    let grid = AblationGrid {
        scenarios: vec![base.scenario.clone()],
        variants: vec![Variant::standard("+FA").unwrap(), Variant::standard("full-BA").unwrap()],
        seeds: vec![0],
        base,
    };
    let mut seen = 0;
    let table = run_ablation(&grid, Some(dir.path()), |_| seen += 1).unwrap();
    assert_eq!(seen, 2);
    assert_eq!(table.rows.len(), 2);
    let name = grid.scenarios[0].name();
    let fa = table.row(&name, "+FA").unwrap();
    assert!(fa.forward.is_some() && fa.backward.is_none());
    let ba = table.row(&name, "full-BA").unwrap();
    assert!(ba.backward.is_some());
    // Both variants share forward settings, so their forward snapshots agree.
    assert_eq!(fa.forward, ba.forward);
    for f in ["table.md", "table.csv", "cells.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_biadapt"))
}

#[test]
fn binary_reports_errors_as_json_with_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "tau: -1\n").unwrap();
    let out = bin().args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_FAILURE));
    let rec: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(rec["status"], "error");
    assert_eq!(rec["kind"], "config");

    let missing = bin().args(["train", "--config"]).arg(dir.path().join("absent.cfg")).output().unwrap();
    assert_eq!(missing.status.code(), Some(EXIT_IO));
}

#[test]
fn binary_generates_labeled_folders() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let out = bin()
        .args(["generate", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("data"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let n = |d: &str| fs::read_dir(dir.path().join("data/patch_swap").join(d)).unwrap().count();
    assert_eq!(n("real") + n("fake"), 24);
}
