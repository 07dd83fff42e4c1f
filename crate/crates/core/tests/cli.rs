use std::fs;
use std::process::Command;

use passion::data::load_container;
use passion::presence::PresenceManifest;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_passion"))
}

#[test]
fn gen_presence_prints_a_valid_manifest() {
    let out = bin()
        .args(["gen-presence", "--targets", "0.2,0.5,0.8", "--n", "20", "--seed", "4"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let manifest = PresenceManifest::parse(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(manifest.matrix.n_samples(), 20);
    assert!(manifest.matrix.validate().is_ok());
}

#[test]
fn gen_data_train_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("test.pass");
    let spec = dir.path().join("spec.txt");
    fs::write(
        &spec,
        format!("n_samples = 3\nshape = 16x16\nseed = 5\nout = {}\n", data.display()),
    )
    .unwrap();
    let out = bin().args(["gen-data", "--spec"]).arg(&spec).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (header, samples) = load_container(&data).unwrap();
    assert_eq!((header.n_records, header.n_modalities), (3, 3));
    assert!(samples.iter().all(|s| s.available().len() == 3));
    assert!(data.with_extension("manifest").exists());

    let config = dir.path().join("run.cfg");
    fs::write(
        &config,
        "method = passion\nepochs = 1\nlr = 0.002\ndata.n_samples = 4\ndata.shape = 16x16\ntest.n_samples = 2\nmodel.depth = 2\n",
    )
    .unwrap();
    let run_dir = dir.path().join("run");
    let out = bin()
        .args(["train", "--config"])
        .arg(&config)
        .args(["--seed", "1", "--out"])
        .arg(&run_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let resolved = fs::read_to_string(run_dir.join("config.resolved")).unwrap();
    assert!(resolved.contains("seed = 1"));

    let csv = dir.path().join("eval.csv");
    let out = bin()
        .args(["evaluate", "--checkpoint"])
        .arg(run_dir.join("model.ckpt"))
        .arg("--data")
        .arg(&data)
        .arg("--csv")
        .arg(&csv)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.matches('●').count() + text.matches('○').count(), 21);
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 1 + 1 + 7 + 1);
}

#[test]
fn errors_exit_nonzero_with_one_line() {
    let out = bin().args(["train", "--config", "/nonexistent/cfg"]).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error:"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.pass");
    fs::write(&bad, b"NOPE").unwrap();
    let out = bin()
        .args(["evaluate", "--checkpoint"])
        .arg(&bad)
        .arg("--data")
        .arg(&bad)
        .output()
        .unwrap();
    assert!(!out.status.success());

    let out = bin().args(["gen-presence", "--targets", "1.5", "--n", "4"]).output().unwrap();
    assert!(!out.status.success());
}
