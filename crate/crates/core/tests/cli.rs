use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gpmseg::checkpoint;
use gpmseg::cli::{read_manifest, MANIFEST_FILE};

fn gpmseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gpmseg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path, count: usize) -> PathBuf {
    let out = dir.join("data");
    let o = gpmseg(&["synth", "--out", out.to_str().unwrap(), "--count", &count.to_string(), "--size", "16"]);
    assert!(o.status.success(), "{}", stderr(&o));
    out.join("manifest.tsv")
}

/// The single run directory created under `out`.
fn run_dir(out: &Path) -> PathBuf {
    let dirs: Vec<_> = std::fs::read_dir(out).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs.into_iter().next().unwrap()
}

fn tiny_train(manifest: &Path, out: &Path) -> Vec<String> {
    [
        "base_channels=2",
        "image_size=16",
        "epochs=2",
        "t_max=2",
        "batch_size=2",
        "seeds=0",
        "val_fraction=0",
        "parallel=false",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain([
        format!("train_manifest={}", manifest.display()),
        format!("test_manifests=held:{}", manifest.display()),
        format!("out_dir={}", out.display()),
        format!("data_root={}", manifest.parent().unwrap().display()),
    ])
    .collect()
}

fn with_sets<'a>(cmd: &'a str, sets: &'a [String]) -> Vec<&'a str> {
    let mut v = vec![cmd, "--quiet"];
    for s in sets {
        v.extend(["--set", s.as_str()]);
    }
    v
}

fn summary_dsc(dir: &Path) -> f64 {
    let csv = std::fs::read_to_string(dir.join("summary.csv")).unwrap();
    let line = csv.lines().nth(1).expect("one summary row");
    line.split(',').nth(2).unwrap().parse().unwrap()
}

#[test]
fn unknown_key_is_a_config_error() {
    let o = gpmseg(&["train", "--set", "nonsense=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nonsense"), "{}", stderr(&o));
}

#[test]
fn missing_mask_is_a_data_error_naming_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(tmp.path(), 3);
    let mask = manifest.parent().unwrap().join("scene-0001_mask.png");
    std::fs::remove_file(&mask).expect("synthetic mask exists");
    let sets = tiny_train(&manifest, &tmp.path().join("runs"));
    let o = gpmseg(&with_sets("train", &sets));
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("scene-0001_mask.png"), "{}", stderr(&o));
}

#[test]
fn empty_manifest_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = tmp.path().join("empty.tsv");
    std::fs::write(&manifest, "").unwrap();
    let sets = tiny_train(&manifest, &tmp.path().join("runs"));
    let o = gpmseg(&with_sets("train", &sets));
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn train_replay_and_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(tmp.path(), 4);
    let first_out = tmp.path().join("first");
    let o = gpmseg(&with_sets("train", &tiny_train(&manifest, &first_out)));
    assert!(o.status.success(), "{}", stderr(&o));
    let first = run_dir(&first_out);
    let m = read_manifest(&first.join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.status, "ok");
    assert_eq!(m.seeds, vec![0]);

    let manifest_arg = first.join(MANIFEST_FILE);
    let o = gpmseg(&["train", "--quiet", "--replay", manifest_arg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let second = std::fs::read_dir(&first_out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| *p != first)
        .expect("replay run directory");
    let log = |d: &Path| std::fs::read_to_string(d.join("seed0").join("train_log.csv")).unwrap();
    assert_eq!(log(&first), log(&second));
    let hash = |d: &Path| checkpoint::file_sha256(&d.join("seed0").join("last.ckpt")).unwrap();
    assert_eq!(hash(&first), hash(&second));

    let eval_out = tmp.path().join("eval");
    let ckpt = first.join("seed0").join("last.ckpt");
    let held = format!("held:{}", manifest.display());
    let eval_set = format!("out_dir={}", eval_out.display());
    let root_set = format!("data_root={}", manifest.parent().unwrap().display());
    let o = gpmseg(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--manifest",
        &held,
        "--set",
        &eval_set,
        "--set",
        &root_set,
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(summary_dsc(&run_dir(&eval_out)), summary_dsc(&first));
}

#[test]
fn checkpoint_version_mismatch_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(tmp.path(), 2);
    let out = tmp.path().join("runs");
    let mut sets = tiny_train(&manifest, &out);
    sets.push("epochs=1".into());
    sets.push("t_max=1".into());
    let o = gpmseg(&with_sets("train", &sets));
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = run_dir(&out).join("seed0").join("last.ckpt");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    bytes[checkpoint::MAGIC.len()..checkpoint::MAGIC.len() + 4].copy_from_slice(&99u32.to_le_bytes());
    let bad = tmp.path().join("bad.ckpt");
    std::fs::write(&bad, bytes).unwrap();
    let held = format!("held:{}", manifest.display());
    let eval_set = format!("out_dir={}", tmp.path().join("eval").display());
    let root_set = format!("data_root={}", manifest.parent().unwrap().display());
    let o = gpmseg(&[
        "eval",
        "--checkpoint",
        bad.to_str().unwrap(),
        "--manifest",
        &held,
        "--set",
        &eval_set,
        "--set",
        &root_set,
    ]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("99"), "{}", stderr(&o));
}

#[test]
fn complexity_report_lists_both_models() {
    let tmp = tempfile::tempdir().unwrap();
    let out_set = format!("out_dir={}", tmp.path().display());
    let o = gpmseg(&["complexity", "--input-size", "32", "--set", "base_channels=4", "--set", &out_set]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("U-Net"), "{text}");
    assert!(text.contains("GPM"), "{text}");
}

#[test]
fn depth_metrics_on_identical_maps_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(tmp.path(), 1);
    let depth = manifest.parent().unwrap().join("scene-0000_depth.bin");
    let out_set = format!("out_dir={}", tmp.path().join("runs").display());
    let d = depth.to_str().unwrap();
    let o = gpmseg(&["depth-metrics", "--pred", d, "--gt", d, "--normalized", "--set", &out_set]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("delta1 = 1.000000"), "{text}");
}
