//! End-to-end runs of the experiment pipeline on synthetic CIFAR-10 files.

mod common;

use std::path::{Path, PathBuf};

use common::write_synthetic_cifar;
use pcdyn::corruption::NoiseKind;
use pcdyn::harness::{artifacts, run_experiment, Condition, ExperimentConfig, HarnessError, NamedHps, Stage};
use pcdyn::hyperparams::{HpMask, HyperParams};
use pcdyn::network::BaselineVariant;

fn smoke_config(data: &Path, out: PathBuf) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new("smoke");
    cfg.out_dir = out;
    cfg.data.dir = Some(data.into());
    cfg.data.train_size = 1000;
    cfg.data.val_size = 200;
    for stage in [&mut cfg.ff, &mut cfg.fb, &mut cfg.hp] {
        stage.epochs = 2;
        stage.batch_size = 32;
    }
    cfg.ff.optimizer.lr = 0.05;
    cfg.hp.timesteps = 3;
    cfg.hp.restarts = 1;
    cfg.baselines = vec![BaselineVariant::Same];
    cfg.stages.push(Stage::Ablate);
    cfg.eval.timesteps = 3;
    cfg.eval.include_ablation = true;
    cfg.attack.images = 4;
    cfg.attack.config.timesteps = 3;
    cfg.attack.config.steps = 10;
    cfg
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn smoke_run_emits_every_artifact_and_is_reproducible() {
    let data = tempfile::tempdir().unwrap();
    write_synthetic_cifar(data.path(), 200, 200);
    let out = tempfile::tempdir().unwrap();
    let cfg = smoke_config(data.path(), out.path().join("a"));
    let summary = run_experiment(&cfg).unwrap();

    let dir = &cfg.out_dir;
    let mut expected: Vec<String> = [
        artifacts::CONFIG,
        artifacts::FF_WEIGHTS,
        artifacts::FF_REPORT,
        "ff_curves.csv",
        "fb_unsup.pcw",
        "fb_unsup_report.json",
        "fb_unsup_curves.csv",
        "baseline_same.pcw",
        "baseline_same_report.json",
        "baseline_same_curves.csv",
        artifacts::METRICS,
        artifacts::RELATIVE_HP,
        artifacts::ATTACK_TABLE,
    ]
    .map(String::from)
    .to_vec();
    for mask in [HpMask::NONE, HpMask::ZERO_BETA, HpMask::ZERO_ALPHA] {
        for c in &cfg.conditions {
            expected.push(artifacts::hp_report(mask, c));
            expected.push(artifacts::curves(&artifacts::hp_report(mask, c)));
        }
        expected.push(artifacts::accuracy_chart(mask));
        for kind in [NoiseKind::Gaussian, NoiseKind::SaltPepper] {
            expected.push(artifacts::relative_hp_chart(mask, kind));
        }
    }
    for n in &cfg.attack.configurations {
        expected.push(artifacts::attack_report(&n.name));
    }
    for name in &expected {
        assert!(dir.join(name).is_file(), "missing {name}");
        assert!(summary.artifacts.contains(&dir.join(name)), "{name} not reported");
    }

    let hash = cfg.hash();
    for name in expected.iter().filter(|n| n.ends_with(".csv")) {
        let text = String::from_utf8(read(&dir.join(name))).unwrap();
        assert_eq!(text.lines().next().unwrap(), format!("# config_sha256={hash}"), "{name}");
    }
    // One row per (condition, restart, time-step) for every hp run, plus the
    // fixed configuration and the baseline per condition.
    let conditions = cfg.conditions.len();
    let hp_rows = 3 * conditions * cfg.hp.restarts * (cfg.eval.timesteps + 1);
    let fixed_rows = conditions * (cfg.eval.timesteps + 1);
    assert_eq!(summary.records.len(), hp_rows + fixed_rows + conditions);
    assert!(summary.records.iter().all(|r| (0.0..=1.0).contains(&r.accuracy)));
    let relative = String::from_utf8(read(&dir.join(artifacts::RELATIVE_HP))).unwrap();
    assert_eq!(relative.lines().count(), 2 + 3 * 2 * 4 * 4);

    // Feed-forward coefficients give the same accuracy at every time-step.
    for c in &cfg.conditions {
        let acc: Vec<f64> = summary
            .records
            .iter()
            .filter(|r| r.regime == "fixed_feedforward" && r.kind == c.kind && r.level == c.level)
            .map(|r| r.accuracy)
            .collect();
        assert_eq!(acc.len(), cfg.eval.timesteps + 1);
        assert!(acc.iter().all(|&a| a == acc[0]), "{acc:?}");
    }

}

#[test]
fn reruns_produce_identical_bytes() {
    let data = tempfile::tempdir().unwrap();
    write_synthetic_cifar(data.path(), 40, 60);
    let out = tempfile::tempdir().unwrap();
    let mut cfg = smoke_config(data.path(), out.path().join("a"));
    cfg.data.train_size = 200;
    cfg.data.val_size = 60;
    cfg.ff.epochs = 10;
    cfg.conditions = vec![Condition::CLEAN, Condition { kind: NoiseKind::SaltPepper, level: 2 }];
    cfg.stages.retain(|&s| s != Stage::Ablate);
    cfg.eval.include_ablation = false;
    cfg.attack.images = 2;
    let first = run_experiment(&cfg).unwrap();
    let again = ExperimentConfig { out_dir: out.path().join("b"), ..cfg.clone() };
    run_experiment(&again).unwrap();
    let mut compared = 0;
    for path in &first.artifacts {
        let name = path.file_name().unwrap().to_str().unwrap();
        if name.ends_with(".csv") || name.ends_with(".pcw") || name.ends_with(".svg") {
            assert_eq!(read(path), read(&again.out_dir.join(name)), "{name} differs");
            compared += 1;
        }
    }
    assert!(compared >= 10, "{compared}");
}

#[test]
fn later_stages_resume_from_persisted_weights() {
    let data = tempfile::tempdir().unwrap();
    write_synthetic_cifar(data.path(), 40, 40);
    let out = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::new("resume");
    cfg.out_dir = out.path().into();
    cfg.data.dir = Some(data.path().into());
    cfg.data.train_size = 100;
    cfg.data.val_size = 40;
    cfg.ff.epochs = 1;
    cfg.fb.epochs = 1;
    cfg.hp.epochs = 1;
    cfg.hp.timesteps = 2;
    cfg.hp.restarts = 1;
    cfg.conditions = vec![Condition::CLEAN, Condition { kind: NoiseKind::Gaussian, level: 3 }];
    cfg.eval.timesteps = 2;
    cfg.eval.fixed.push(NamedHps { name: "memory".into(), hps: vec![HyperParams { mu: 0.5, gamma: 0.5, beta: 0.0, alpha: 0.0 }] });

    cfg.stages = vec![Stage::TrainFb];
    match run_experiment(&cfg) {
        Err(HarnessError::MissingArtifact { stage: "train-fb", path }) => assert!(path.ends_with("ff.pcw")),
        other => panic!("{other:?}"),
    }
    cfg.stages = vec![Stage::TrainFf];
    run_experiment(&cfg).unwrap();
    cfg.stages = vec![Stage::Eval];
    match run_experiment(&cfg) {
        Err(HarnessError::MissingArtifact { stage: "eval", path }) => assert!(path.ends_with("fb_unsup.pcw")),
        other => panic!("{other:?}"),
    }
    cfg.stages = vec![Stage::TrainFb, Stage::TrainHp];
    run_experiment(&cfg).unwrap();
    let hp_path = out.path().join(artifacts::hp_report(HpMask::NONE, &Condition::CLEAN));
    let before = read(&hp_path);
    cfg.stages = vec![Stage::Eval, Stage::Report];
    let summary = run_experiment(&cfg).unwrap();
    assert_eq!(read(&hp_path), before);
    assert!(summary.records.iter().any(|r| r.regime == "fixed_memory"));
    assert!(out.path().join(artifacts::METRICS).is_file());
}
