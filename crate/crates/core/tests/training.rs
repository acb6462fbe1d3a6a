use std::fs;
use std::time::Instant;

use rpc_gcd::config::RunConfig;
use rpc_gcd::eval::{evaluate, run_ablation, run_sweep, AblationSpec, SweepParam};
use rpc_gcd::model::{Checkpoint, ModelParams};
use rpc_gcd::synthdata::{generate_world, load_dataset, save_dataset, GcdSplit, HiddenTruth};
use rpc_gcd::trainer::{
    checkpoint_path, params_from_checkpoint, run_training, RunOptions, RunResult, FINAL_CHECKPOINT,
    LAST_GOOD_CHECKPOINT, METRICS_FILE, SUMMARY_FILE,
};

fn small(extra: &[&str]) -> RunConfig {
    let mut o: Vec<String> = [
        "world.num_classes_total=4",
        "world.num_known=2",
        "world.dim_input=8",
        "world.samples_per_class=30",
        "model.hidden_dim=16",
        "model.feature_dim=8",
        "model.proj_hidden_dim=16",
        "model.proj_dim=8",
        "train.epochs=6",
        "train.warmup_epochs_ova=2",
        "train.batch_size=8",
        "train.mu=2",
        "train.checkpoint_every=2",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    o.extend(extra.iter().map(|s| s.to_string()));
    RunConfig::from_overrides(&o).unwrap()
}

fn train(cfg: &RunConfig, split: &GcdSplit, truth: &HiddenTruth, opts: &RunOptions) -> RunResult {
    let mut eval = |p: &ModelParams| evaluate(p, split, truth);
    run_training(cfg, split, opts, Some(&mut eval)).unwrap()
}

fn to_dir(dir: &std::path::Path) -> RunOptions {
    RunOptions {
        out_dir: Some(dir.to_path_buf()),
        ..RunOptions::default()
    }
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let cfg = small(&["seed=5"]);
    let world = generate_world(&cfg.world_config()).unwrap();
    let (split, truth) = (&world.split, &world.truth);

    let full = tempfile::tempdir().unwrap();
    train(&cfg, split, truth, &to_dir(full.path()));

    let part = tempfile::tempdir().unwrap();
    let first = train(
        &cfg,
        split,
        truth,
        &RunOptions {
            stop_after: Some(4),
            ..to_dir(part.path())
        },
    );
    assert_eq!(first.metrics.len(), 4);
    assert!(!part.path().join(FINAL_CHECKPOINT).exists());
    train(
        &cfg,
        split,
        truth,
        &RunOptions {
            resume: Some(checkpoint_path(part.path(), 4)),
            ..to_dir(part.path())
        },
    );

    for f in [METRICS_FILE, SUMMARY_FILE, FINAL_CHECKPOINT] {
        let a = fs::read(full.path().join(f)).unwrap();
        let b = fs::read(part.path().join(f)).unwrap();
        assert!(a == b, "{f} differs after resume");
    }
}

#[test]
fn resume_rejects_a_different_config() {
    let cfg = small(&[]);
    let world = generate_world(&cfg.world_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    train(&cfg, &world.split, &world.truth, &to_dir(dir.path()));
    let other = small(&["loss.lambda1=0.1"]);
    let opts = RunOptions {
        resume: Some(checkpoint_path(dir.path(), 2)),
        ..RunOptions::default()
    };
    let err = run_training(&other, &world.split, &opts, None).unwrap_err();
    assert!(err.to_string().contains("different config"), "{err}");
}

#[test]
fn one_epoch_on_a_twenty_sample_world_is_fast() {
    let cfg = small(&["world.samples_per_class=5", "train.epochs=1", "train.warmup_epochs_ova=0"]);
    let world = generate_world(&cfg.world_config()).unwrap();
    assert_eq!(world.split.num_labeled() + world.split.num_unlabeled(), 20);
    let t = Instant::now();
    let r = train(&cfg, &world.split, &world.truth, &RunOptions::default());
    assert!(t.elapsed().as_secs_f64() < 1.0);
    assert_eq!(r.metrics.len(), 1);
}

#[test]
fn same_seed_same_metrics_different_seed_different_metrics() {
    let world = generate_world(&small(&[]).world_config()).unwrap();
    let run = |seed: &str| train(&small(&[seed]), &world.split, &world.truth, &RunOptions::default()).metrics;
    let a = run("seed=1");
    assert_eq!(a, run("seed=1"));
    assert_ne!(a, run("seed=2"));
}

#[test]
fn summary_config_reproduces_the_run() {
    let cfg = small(&["seed=9", "loss.alpha=0.2"]);
    let world = generate_world(&cfg.world_config()).unwrap();
    let a = tempfile::tempdir().unwrap();
    train(&cfg, &world.split, &world.truth, &to_dir(a.path()));

    let summary = fs::read_to_string(a.path().join(SUMMARY_FILE)).unwrap();
    let again = RunConfig::from_json_str(&summary, &[]).unwrap();
    assert_eq!(again, cfg);
    let world2 = generate_world(&again.world_config()).unwrap();
    let b = tempfile::tempdir().unwrap();
    train(&again, &world2.split, &world2.truth, &to_dir(b.path()));
    assert_eq!(
        fs::read(a.path().join(SUMMARY_FILE)).unwrap(),
        fs::read(b.path().join(SUMMARY_FILE)).unwrap()
    );
}

#[test]
fn saved_dataset_trains_identically() {
    let cfg = small(&["seed=3"]);
    let world = generate_world(&cfg.world_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    save_dataset(&world.split, &path).unwrap();
    let loaded = load_dataset(&path).unwrap();
    let a = train(&cfg, &world.split, &world.truth, &RunOptions::default());
    let b = train(&cfg, &loaded, &world.truth, &RunOptions::default());
    assert_eq!(a.metrics, b.metrics);
}

#[test]
fn final_checkpoint_reproduces_final_accuracy() {
    let cfg = small(&[]);
    let world = generate_world(&cfg.world_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let r = train(&cfg, &world.split, &world.truth, &to_dir(dir.path()));
    let ck = Checkpoint::load(&dir.path().join(FINAL_CHECKPOINT)).unwrap();
    let params = params_from_checkpoint(&ck).unwrap();
    assert_eq!(params, r.state.params);
    let acc = evaluate(&params, &world.split, &world.truth).unwrap();
    assert_eq!(Some(acc), r.metrics.last().unwrap().accuracy);
}

#[test]
fn divergence_aborts_with_last_good_checkpoint() {
    let cfg = small(&["train.lr0=1e300", "train.lr_min=0"]);
    let world = generate_world(&cfg.world_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let err = run_training(&cfg, &world.split, &to_dir(dir.path()), None).unwrap_err();
    assert!(err.is_numerical(), "{err}");
    let ck = Checkpoint::load(&dir.path().join(LAST_GOOD_CHECKPOINT)).unwrap();
    assert!(params_from_checkpoint(&ck).unwrap().is_finite());
}

#[test]
fn ablation_and_sweep_tables_cover_every_run() {
    let cfg = small(&["train.epochs=3", "train.warmup_epochs_ova=1"]);
    let table = run_ablation(&cfg, &AblationSpec::standard(), &[0, 1], 2);
    assert_eq!(table.rows.len(), 4);
    assert!(table.rows.iter().all(|r| r.runs.len() == 2 && r.failures() == 0));
    let csv = table.to_csv();
    assert_eq!(csv.lines().count(), 1 + 4, "{csv}");

    let curve = run_sweep(&cfg, SweepParam::Alpha, &[0.0, 0.3], 2).unwrap();
    assert_eq!(curve.rows.iter().map(|r| r.value).collect::<Vec<_>>(), [0.0, 0.3]);
    assert!(curve.rows.iter().all(|r| r.result.is_ok()));
}
