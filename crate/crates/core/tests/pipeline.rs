use std::fs;
use std::path::Path;

use idcanvas::harness::eval::{load_checkpoint, run_eval, run_sample};
use idcanvas::harness::train::{rng_sidecar, LOSS_LOG, TRAIN_LOG};
use idcanvas::harness::{run_train, ExperimentConfig};
use idcanvas::metrics::RankingThresholds;
use idcanvas::Error;

fn small(out: &Path, steps: u64) -> ExperimentConfig {
    ExperimentConfig {
        steps,
        batch: 4,
        heldout_scenes: 4,
        sample_steps: 4,
        out: out.to_path_buf(),
        ..ExperimentConfig::default()
    }
}

fn rows(path: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn flow_loss_falls_over_two_hundred_steps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig { steps: 200, out: dir.path().to_path_buf(), ..ExperimentConfig::default() };
    let out = run_train(&cfg, None).unwrap();
    let mean = |r: &[idcanvas::harness::train::StepRecord]| r.iter().map(|s| s.l_fm).sum::<f64>() / r.len() as f64;
    let first = mean(&out.records[..20]);
    let last = mean(&out.records[180..]);
    assert!(last < 0.8 * first, "{first} -> {last}");
    assert!(out.records.iter().all(|r| r.l.is_finite()));
    let log = rows(&dir.path().join(TRAIN_LOG));
    assert_eq!(log.len(), 200);
    assert_eq!(log[0].len(), 6);
    assert!(dir.path().join("manifest_train.txt").exists());
    assert!(dir.path().join("config_train.txt").exists());
}

#[test]
fn zero_lambda_still_logs_the_face_loss() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig { lambda: 0.0, ..small(dir.path(), 6) };
    let out = run_train(&cfg, None).unwrap();
    assert!(out.records.iter().any(|r| r.l_fs > 0.0));
    for r in &out.records {
        assert_eq!(r.l, r.l_fm);
    }
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let whole = small(&dir.path().join("whole"), 8);
    run_train(&whole, None).unwrap();

    let part = small(&dir.path().join("part"), 8);
    let first = ExperimentConfig { steps: 4, checkpoint_every: 2, ..part.clone() };
    run_train(&first, None).unwrap();
    let ckpt = part.out.join("checkpoints").join("step0000004.ckpt");
    assert!(ckpt.exists() && rng_sidecar(&ckpt).exists());
    run_train(&part, Some(&ckpt)).unwrap();

    let a = fs::read(whole.out.join(LOSS_LOG)).unwrap();
    let b = fs::read(part.out.join(LOSS_LOG)).unwrap();
    assert_eq!(String::from_utf8(a).unwrap(), String::from_utf8(b).unwrap());
    assert_eq!(
        fs::read(whole.out.join("final.ckpt")).unwrap(),
        fs::read(part.out.join("final.ckpt")).unwrap()
    );
}

#[test]
fn sampling_and_evaluation_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), 3);
    let out = run_train(&cfg, None).unwrap();
    let a = run_sample(&cfg, &out.checkpoint, 2).unwrap();
    let b = run_sample(&cfg, &out.checkpoint, 2).unwrap();
    assert_eq!(a, b);
    assert!(dir.path().join("sample_0000.ppm").exists());
    let other_seed = ExperimentConfig { seed: 1, ..cfg.clone() };
    assert_ne!(run_sample(&other_seed, &out.checkpoint, 1).unwrap()[0], a[0]);

    let ev = run_eval(&cfg, &out.checkpoint, &RankingThresholds::default()).unwrap();
    assert!(ev.heldout_l_fs.is_finite());
    assert!((0.0..=1.0).contains(&ev.localization));
    for f in ["eval_report.csv", "localization.csv", "eval_summary.txt", "manifest_eval.txt", "manifest_train.txt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn checkpoint_of_another_width_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), 1);
    let out = run_train(&cfg, None).unwrap();
    let wider = ExperimentConfig { width: 16, heads: 1, ..cfg };
    assert!(matches!(load_checkpoint(&wider, &out.checkpoint), Err(Error::Config(_))));
    assert!(load_checkpoint(&wider, &dir.path().join("missing.ckpt")).is_err());
}

#[test]
fn config_text_round_trips_and_rejects_bad_values() {
    let cfg = ExperimentConfig { lambda: 0.25, seed: 9, box_sizes: vec![8, 12], ..ExperimentConfig::default() };
    let mut back = ExperimentConfig::default();
    back.apply_text(&cfg.to_text()).unwrap();
    assert_eq!(back, cfg);

    let mut c = ExperimentConfig::default();
    assert!(c.apply_text("no_such_key = 1").is_err());
    assert!(c.apply_text("steps = many").is_err());
    let bad = ExperimentConfig { lambda: -1.0, ..ExperimentConfig::default() };
    assert!(bad.validate().is_err());
    let bad = ExperimentConfig { width: 31, ..ExperimentConfig::default() };
    assert!(bad.validate().is_err());
    let bad = ExperimentConfig { image_size: 30, ..ExperimentConfig::default() };
    assert!(bad.validate().is_err());
}
