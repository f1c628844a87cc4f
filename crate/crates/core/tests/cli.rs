use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smoke() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json")
}

fn mabn(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mabn")).args(args).arg("--out").arg(out).env("MABN_THREADS", "1").output().unwrap()
}

fn with_config<'a>(verb: &'a str, extra: &[&'a str], cfg: &'a str) -> Vec<&'a str> {
    let mut v = vec![verb, "--config", cfg];
    v.extend_from_slice(extra);
    v
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Trains the joint and meta stages of the smoke config into `out`.
fn trained(out: &Path) -> (PathBuf, PathBuf) {
    let cfg = smoke();
    let cfg = cfg.to_str().unwrap();
    let o = mabn(&with_config("train-joint", &[], cfg), out);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let joint = out.join("joint.ckpt");
    let o = mabn(&with_config("meta-train", &["--ckpt", joint.to_str().unwrap()], cfg), out);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    (joint, out.join("meta.ckpt"))
}

#[test]
fn full_pipeline_succeeds_and_keeps_weights_fixed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke();
    let cfg = cfg.to_str().unwrap();
    let o = mabn(&with_config("train-joint", &[], cfg), dir.path());
    assert_eq!(code(&o), 0);
    let joint = dir.path().join("joint.ckpt");
    let o = mabn(&with_config("meta-train", &["--ckpt", joint.to_str().unwrap()], cfg), dir.path());
    assert_eq!(code(&o), 0);
    let line = stdout(&o).lines().find(|l| l.starts_with("theta_hash in=")).unwrap().to_string();
    let (a, b) = line.trim_start_matches("theta_hash in=").split_once(" out=").unwrap();
    assert_eq!(b.split_whitespace().next().unwrap(), a);
    assert!(line.ends_with("equal=true"));
    for f in ["config.resolved.json", "run.log", "telemetry_joint.csv", "telemetry_meta.csv", "meta.ckpt"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    assert!(!dir.path().join("mabn.lock").exists());
}

#[test]
fn no_adapt_flag_matches_the_no_adapt_arm() {
    let dir = tempfile::tempdir().unwrap();
    let (_, meta) = trained(dir.path());
    let cfg = smoke();
    let cfg = cfg.to_str().unwrap();
    let meta = meta.to_str().unwrap();
    let eval_dir = dir.path().join("eval");
    let o = mabn(&with_config("adapt-eval", &["--ckpt", meta, "--no-adapt"], cfg), &eval_dir);
    assert_eq!(code(&o), 0);
    let abl_dir = dir.path().join("abl");
    let o = mabn(&with_config("ablate", &["--ckpt", meta], cfg), &abl_dir);
    assert_eq!(code(&o), 0);
    let eval = std::fs::read_to_string(eval_dir.join("metrics.csv")).unwrap();
    let abl = std::fs::read_to_string(abl_dir.join("ablation.csv")).unwrap();
    let no_adapt: Vec<&str> = abl.lines().filter(|l| l.starts_with("NoAdapt,")).collect();
    let evaluated: Vec<&str> = eval.lines().skip(1).collect();
    assert!(!no_adapt.is_empty());
    assert_eq!(evaluated, no_adapt);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (_, a) = trained(&dir.path().join("a"));
    let (_, b) = trained(&dir.path().join("b"));
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    let read = |p: &str| std::fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("a/telemetry_meta.csv"), read("b/telemetry_meta.csv"));
}

#[test]
fn gen_data_writes_a_loadable_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke();
    let o = mabn(&with_config("gen-data", &[], cfg.to_str().unwrap()), dir.path());
    assert_eq!(code(&o), 0);
    let set = mabn::data::load_dataset(&dir.path().join("dataset.mabd")).unwrap();
    assert_eq!((set.sources.len(), set.targets.len()), (3, 2));
}

#[test]
fn invalid_configuration_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{ "data": { "sources": 1 } }"#).unwrap();
    let o = mabn(&with_config("gen-data", &[], bad.to_str().unwrap()), &dir.path().join("o"));
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("data.sources"));
    std::fs::write(&bad, r#"{ "unknown_key": 1 }"#).unwrap();
    let o = mabn(&with_config("gen-data", &[], bad.to_str().unwrap()), &dir.path().join("o"));
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_or_corrupt_checkpoint_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke();
    let cfg = cfg.to_str().unwrap();
    let missing = dir.path().join("none.ckpt");
    let o = mabn(&with_config("adapt-eval", &["--ckpt", missing.to_str().unwrap()], cfg), &dir.path().join("o"));
    assert_eq!(code(&o), 3);
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"MABN not really a checkpoint").unwrap();
    let o = mabn(&with_config("adapt-eval", &["--ckpt", junk.to_str().unwrap()], cfg), &dir.path().join("o"));
    assert_eq!(code(&o), 3);
}

#[test]
fn meta_training_outside_affine_scope_exits_with_5() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke();
    let cfg = cfg.to_str().unwrap();
    let o = mabn(&with_config("train-joint", &[], cfg), dir.path());
    assert_eq!(code(&o), 0);
    let joint = dir.path().join("joint.ckpt");
    let o = mabn(&with_config("meta-train", &["--ckpt", joint.to_str().unwrap(), "--scope", "all"], cfg), dir.path());
    assert_eq!(code(&o), 5);
}

#[test]
fn locked_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("mabn.lock"), b"").unwrap();
    let cfg = smoke();
    let o = mabn(&with_config("gen-data", &[], cfg.to_str().unwrap()), dir.path());
    assert_ne!(code(&o), 0);
    assert!(dir.path().join("mabn.lock").exists());
}
