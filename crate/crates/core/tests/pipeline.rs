use std::fs;

use passion::config::{ExperimentConfig, Method};
use passion::data::{generate_dataset, load_container, save_container, DatasetSpec};
use passion::metrics::{evaluate_combinations, nested_groups, EvalOptions, Segmenter};
use passion::nn::checkpoint;
use passion::plot::{curves, parse_rp_log, read_plot_values};
use passion::presence::PresenceManifest;
use passion::train::{prepare_data, run_experiment, train};

const TINY: &str = "epochs = 1\nlr = 0.002\ndata.n_samples = 6\ndata.shape = 16x16\ntest.n_samples = 3\nmodel.depth = 2\n";

fn tiny(extra: &str, dir: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::parse(&format!("{TINY}{extra}")).unwrap();
    cfg.out_dir = dir.to_path_buf();
    cfg
}

#[test]
fn one_epoch_emits_every_artifact() {
    for method in ["baseline", "moddrop", "passion"] {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(&format!("method = {method}\n"), dir.path());
        let out = run_experiment(&cfg).unwrap();
        let a = &out.artifacts;
        for p in [&a.checkpoint, &a.rp_log, &a.rp_plot, &a.report_csv, &a.report_txt, &a.config, &a.loss_trace, &a.presence] {
            assert!(p.exists(), "{method}: {} missing", p.display());
        }
        let resolved = ExperimentConfig::parse(&fs::read_to_string(&a.config).unwrap()).unwrap();
        assert_eq!(resolved.method, cfg.method);
        assert_eq!(resolved.lr, cfg.lr);
        assert_eq!(out.report.rows.len(), 7);
        let manifest = PresenceManifest::parse(&fs::read_to_string(&a.presence).unwrap()).unwrap();
        assert_eq!(manifest.matrix.n_samples(), 6);
    }
}

#[test]
fn rp_log_has_m_rows_per_epoch_and_matches_plot() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny("method = passion\n", dir.path());
    cfg.epochs = 3;
    let out = run_experiment(&cfg).unwrap();
    let log = parse_rp_log(&fs::read_to_string(&out.artifacts.rp_log).unwrap()).unwrap();
    assert_eq!(log.len(), 3 * 3);
    for e in 0..3 {
        assert_eq!(log.iter().filter(|r| r.epoch == e).count(), 3);
    }
    assert_eq!(log, out.train.rp_log);
    let plot = read_plot_values(&fs::read_to_string(&out.artifacts.rp_plot).unwrap()).unwrap();
    for (m, pts) in curves(&log) {
        assert_eq!(plot[&m], pts.iter().map(|p| p.1).collect::<Vec<_>>());
    }
}

#[test]
fn same_seed_same_results() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let outs: Vec<_> = dirs
        .iter()
        .map(|d| run_experiment(&tiny("method = moddrop\nseed = 3\n", d.path())).unwrap())
        .collect();
    assert_eq!(outs[0].report, outs[1].report);
    assert_eq!(outs[0].train.trace, outs[1].train.trace);
    assert_eq!(
        fs::read(&outs[0].artifacts.checkpoint).unwrap(),
        fs::read(&outs[1].artifacts.checkpoint).unwrap()
    );
}

#[test]
fn baseline_coefficients_stay_at_initial_values() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny("method = baseline\n", dir.path());
    cfg.epochs = 2;
    let data = prepare_data(&cfg).unwrap();
    let out = train(&cfg, &data).unwrap();
    let rates = data.presence.matrix.missing_rates().unwrap();
    for (b, r) in out.final_beta.iter().zip(rates.rates()) {
        assert_eq!(*b, (1.0 / (1.0 - r)).max(0.1));
    }
}

#[test]
fn checkpoint_reload_reproduces_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny("method = passion\n", dir.path());
    let out = run_experiment(&cfg).unwrap();
    let model = checkpoint::load(&out.artifacts.checkpoint).unwrap();
    let data = prepare_data(&cfg).unwrap();
    let report = evaluate_combinations(&model, &data.test, &nested_groups(3), &EvalOptions::default()).unwrap();
    assert_eq!(report, out.report);
    let a = model.segment(&data.test[0]).unwrap();
    let b = out.train.model.segment(&data.test[0]).unwrap();
    assert_eq!(a, b);
}

#[test]
fn container_data_source() {
    let dir = tempfile::tempdir().unwrap();
    let spec = DatasetSpec::desk_default(5, 16, 2);
    let samples = generate_dataset(&spec).unwrap();
    let (train_path, test_path) = (dir.path().join("train.pass"), dir.path().join("test.pass"));
    save_container(&train_path, &samples, 3, 3, spec.shape).unwrap();
    save_container(&test_path, &samples[..2], 3, 3, spec.shape).unwrap();
    assert_eq!(load_container(&train_path).unwrap().1, samples);
    let text = format!(
        "method = baseline\nepochs = 1\nmodel.depth = 2\ndata.path = {}\ntest.path = {}\n",
        train_path.display(),
        test_path.display()
    );
    let mut cfg = ExperimentConfig::parse(&text).unwrap();
    cfg.out_dir = dir.path().join("run");
    assert_eq!(cfg.method, Method::Baseline);
    let out = run_experiment(&cfg).unwrap();
    assert_eq!(out.train.trace.len(), 5);
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(ExperimentConfig::parse("method = moddrop\nbeta = true\n").is_err());
    assert!(ExperimentConfig::parse("method = passion\nproto = false\n").is_err());
    assert!(ExperimentConfig::parse("lr = -1\n").is_err());
    assert!(ExperimentConfig::parse("method = other\n").is_err());
    assert!(ExperimentConfig::parse("data.path = a.pass\n").is_err());
}
