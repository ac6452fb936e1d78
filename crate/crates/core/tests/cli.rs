use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn maskbench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maskbench"))
        .args(args)
        .env_remove("MASKBENCH_OUT")
        .output()
        .expect("binary runs")
}

fn smoke(cmd: &str, out: &Path, extra: &[&str]) -> Output {
    let config = manifest_dir().join("configs/smoke.json");
    let out_set = format!("output_dir={}", out.display());
    let mut args = vec![cmd, "-c", config.to_str().unwrap(), "--set", &out_set];
    args.extend_from_slice(extra);
    maskbench(&args)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn gen_data_writes_layout_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let o = smoke("gen-data", dir.path(), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let data = dir.path().join("data");
    assert!(data.join("labels.csv").is_file());
    let pngs = |sub: &str| fs::read_dir(data.join(sub)).unwrap().count();
    assert_eq!(pngs("images"), 54);
    assert_eq!(pngs("masks"), 54);
    assert!(dir.path().join("bias.json").is_file());
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    let step = &manifest["steps"]["gen-data"];
    assert!(step["artifacts"].as_array().is_some_and(|a| !a.is_empty()), "{manifest}");
}

#[test]
fn second_run_skips_and_force_reruns() {
    let dir = tempfile::tempdir().unwrap();
    assert!(smoke("gen-data", dir.path(), &[]).status.success());
    let again = smoke("gen-data", dir.path(), &[]);
    assert!(again.status.success());
    assert!(stderr(&again).contains("skipping"), "{}", stderr(&again));
    let forced = smoke("gen-data", dir.path(), &["--force"]);
    assert!(!stderr(&forced).contains("skipping"));
}

#[test]
fn invalid_strategy_exits_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let o = smoke("train-cls", dir.path(), &["--set", "strategy.strategy=sideways"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("strategy.strategy"), "{}", stderr(&o));
}

#[test]
fn invalid_value_exits_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let o = smoke("gen-data", dir.path(), &["--set", "dataset.spec.bias_strength=1.5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bias_strength"), "{}", stderr(&o));
}

#[test]
fn unknown_command_exits_2() {
    assert_eq!(maskbench(&["fly"]).status.code(), Some(2));
}

#[test]
fn predicted_masks_without_segmenter_fail_at_runtime() {
    let dir = tempfile::tempdir().unwrap();
    let o = smoke("train-cls", dir.path(), &["--set", "strategy.mask_source=predicted"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train-seg"), "{}", stderr(&o));
}

#[test]
fn report_matches_golden_rendering() {
    let dir = tempfile::tempdir().unwrap();
    let fx = manifest_dir().join("fixtures");
    let inputs: Vec<String> = ["reference_cross_eval.csv", "reference_stage_sweep.csv", "reference_head_sweep.csv"]
        .iter()
        .map(|f| fx.join(f).display().to_string())
        .collect();
    let out = dir.path().display().to_string();
    let mut args = vec!["report", "--out", out.as_str()];
    args.extend(inputs.iter().map(String::as_str));
    let o = maskbench(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let got = fs::read(dir.path().join("report/report.md")).unwrap();
    let want = fs::read(fx.join("reference_report.md")).unwrap();
    assert!(got == want, "rendered:\n{}", String::from_utf8_lossy(&got));
    for stem in ["table1_cross_eval", "table2_stage_sweep", "table3_head_sweep"] {
        assert!(dir.path().join(format!("report/{stem}.csv")).is_file());
        assert!(dir.path().join(format!("report/{stem}.png")).is_file());
    }
}

#[test]
fn report_rejects_out_of_range_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "{\"experiment\":\"stage_sweep\"}\nmodel,stage,seed,id_test,ood_test\nm,0,0,101,50\n").unwrap();
    let out = dir.path().join("out");
    let o = maskbench(&["report", "--out", out.to_str().unwrap(), bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("outside [0, 100]"), "{}", stderr(&o));
}

#[test]
fn pipeline_results_are_byte_identical_across_reruns() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        for cmd in ["gen-data", "train-seg", "eval-seg", "eval", "sweep-stages"] {
            let o = smoke(cmd, dir, &[]);
            assert!(o.status.success(), "{cmd}: {}", stderr(&o));
        }
    }
    for file in ["seg_eval.json", "results/cross_eval.csv", "results/stage_sweep.csv"] {
        let x = fs::read(a.path().join(file)).unwrap();
        let y = fs::read(b.path().join(file)).unwrap();
        assert!(x == y, "{file} differs between runs");
    }
    let o = smoke("report", a.path(), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let md = fs::read_to_string(a.path().join("report/report.md")).unwrap();
    assert!(md.contains("## Results: Early Masking vs Baseline") && md.contains("| toy | L |"), "{md}");
}

#[test]
fn bundled_configs_are_valid() {
    for entry in fs::read_dir(manifest_dir().join("configs")).unwrap() {
        let path = entry.unwrap().path();
        if let Err(e) = maskbench::expcli::ExperimentConfig::load(&path, &[]) {
            panic!("{}: {e}", path.display());
        }
    }
}
