//! End-to-end command-line tests: every subcommand runs against real files
//! in a temp directory, exit codes follow the artifact contract, and
//! seed-identical runs reproduce identical outputs.

use std::path::Path;
use std::process::{Command, Output};

fn tvae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tvae"))
        .args(args)
        .env_remove("TVAE_OUT")
        .output()
        .expect("spawn tvae")
}

fn assert_success(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed ({}):\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn make_glyph_dataset(dir: &Path, seed: u64) -> std::path::PathBuf {
    let out = dir.join(format!("ds{seed}"));
    let res = tvae(&[
        "make-dataset",
        "--variant",
        "mnist-u",
        "--glyph-source",
        "2",
        "--canvas",
        "28",
        "--seed",
        &seed.to_string(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_success(&res, "make-dataset");
    out
}

#[test]
fn make_dataset_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = make_glyph_dataset(dir.path(), 7);
    let b = dir.path().join("copy");
    let res = tvae(&[
        "make-dataset",
        "--variant",
        "mnist-u",
        "--glyph-source",
        "2",
        "--canvas",
        "28",
        "--seed",
        "7",
        "--out",
        b.to_str().unwrap(),
    ]);
    assert_success(&res, "second make-dataset");
    for file in ["images.tvs", "gt.tsv", "manifest.txt"] {
        let x = std::fs::read(a.join(file)).unwrap();
        let y = std::fs::read(b.join(file)).unwrap();
        assert_eq!(x, y, "{file} differs between identical-seed runs");
    }
}

#[test]
fn full_pipeline_train_eval_embed_reconstruct() {
    let dir = tempfile::tempdir().unwrap();
    let ds = make_glyph_dataset(dir.path(), 3);
    let train_out = dir.path().join("run");
    let res = tvae(&[
        "train",
        "--dataset",
        ds.to_str().unwrap(),
        "--out",
        train_out.to_str().unwrap(),
        "--seed",
        "1",
        "--variant",
        "p4",
        "--z-dim",
        "2",
        "--epochs",
        "2",
        "--batch-size",
        "10",
        "--kernel-size",
        "9",
        "--channels",
        "4",
        "--hidden-units",
        "16",
    ]);
    assert_success(&res, "train");
    for artifact in ["last.tvae", "best.tvae", "train_log.tsv", "epochs.tsv", "config.resolved.txt"] {
        assert!(
            train_out.join(artifact).exists(),
            "missing train artifact {artifact}"
        );
    }
    let log = std::fs::read_to_string(train_out.join("train_log.tsv")).unwrap();
    assert!(log.starts_with("epoch\tstep\tloss\trecon\tkl_tr\tkl_theta\tkl_z\tlr\ttemperature"));

    let ckpt = train_out.join("last.tvae");
    let eval_out = dir.path().join("eval");
    let res = tvae(&[
        "eval",
        "--model",
        ckpt.to_str().unwrap(),
        "--dataset",
        ds.to_str().unwrap(),
        "--out",
        eval_out.to_str().unwrap(),
    ]);
    assert_success(&res, "eval");
    let report = std::fs::read_to_string(eval_out.join("report.txt")).unwrap();
    assert!(report.contains("rotation_circular_corr="));
    assert!(report.contains("clustering_accuracy_percent="));

    // identical eval reruns reproduce identical metric files
    let eval_out2 = dir.path().join("eval2");
    let res = tvae(&[
        "eval",
        "--model",
        ckpt.to_str().unwrap(),
        "--dataset",
        ds.to_str().unwrap(),
        "--out",
        eval_out2.to_str().unwrap(),
    ]);
    assert_success(&res, "eval rerun");
    assert_eq!(
        std::fs::read(eval_out.join("metrics.tsv")).unwrap(),
        std::fs::read(eval_out2.join("metrics.tsv")).unwrap()
    );

    let emb = dir.path().join("z.tvs");
    let res = tvae(&[
        "embed",
        "--model",
        ckpt.to_str().unwrap(),
        "--dataset",
        ds.to_str().unwrap(),
        "--out",
        emb.to_str().unwrap(),
    ]);
    assert_success(&res, "embed");
    assert!(emb.exists());

    let rec = dir.path().join("rec");
    let res = tvae(&[
        "reconstruct",
        "--model",
        ckpt.to_str().unwrap(),
        "--dataset",
        ds.to_str().unwrap(),
        "--out",
        rec.to_str().unwrap(),
        "--count",
        "4",
    ]);
    assert_success(&res, "reconstruct");
    assert!(rec.join("aligned.png").exists());
    assert!(rec.join("inputs.png").exists());

    // multi-object synthesis from the base dataset, then detection
    let multi = dir.path().join("multi");
    let res = tvae(&[
        "make-dataset",
        "--variant",
        "mnist-multi",
        "--source",
        ds.to_str().unwrap(),
        "--canvas",
        "70",
        "--count",
        "2",
        "--n-images",
        "3",
        "--seed",
        "5",
        "--out",
        multi.to_str().unwrap(),
    ]);
    assert_success(&res, "make-dataset multi");
    let det = dir.path().join("det");
    let res = tvae(&[
        "detect",
        "--model",
        ckpt.to_str().unwrap(),
        "--dataset",
        multi.to_str().unwrap(),
        "--out",
        det.to_str().unwrap(),
    ]);
    assert_success(&res, "detect");
    let table = std::fs::read_to_string(det.join("detections.tsv")).unwrap();
    assert!(table.starts_with("image\tdetection\tx_px\ty_px\ttheta\tscore"));
}

#[test]
fn shapes_dataset_generates() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("shapes");
    let res = tvae(&[
        "make-dataset",
        "--variant",
        "shapes",
        "--canvas",
        "24",
        "--rotations",
        "4",
        "--scales",
        "2",
        "--translations",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_success(&res, "make-dataset shapes");
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert!(stdout.contains("24 shape images"), "stdout: {stdout}");
}

#[test]
fn unknown_subcommand_and_flags_exit_nonzero() {
    let res = tvae(&["frobnicate"]);
    assert!(!res.status.success());
    let res = tvae(&["train", "--no-such-flag"]);
    assert!(!res.status.success());
}

#[test]
fn unknown_config_key_is_named_in_the_error() {
    let dir = tempfile::tempdir().unwrap();
    let ds = make_glyph_dataset(dir.path(), 9);
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "learning_rate = 1e-3\nbogus_key = 1\n").unwrap();
    let res = tvae(&[
        "train",
        "--dataset",
        ds.to_str().unwrap(),
        "--out",
        dir.path().join("x").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert!(!res.status.success());
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert!(stderr.contains("bogus_key"), "stderr: {stderr}");
}

#[test]
fn non_cpu_device_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ds = make_glyph_dataset(dir.path(), 11);
    let res = tvae(&[
        "train",
        "--dataset",
        ds.to_str().unwrap(),
        "--out",
        dir.path().join("x").to_str().unwrap(),
        "--device",
        "cuda",
    ]);
    assert!(!res.status.success());
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert!(stderr.contains("only cpu"), "stderr: {stderr}");
}

#[test]
fn missing_out_without_env_fails() {
    let dir = tempfile::tempdir().unwrap();
    let ds = make_glyph_dataset(dir.path(), 13);
    let res = tvae(&["eval", "--model", "nope.tvae", "--dataset", ds.to_str().unwrap()]);
    assert!(!res.status.success());
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert!(stderr.contains("TVAE_OUT"), "stderr: {stderr}");
}
