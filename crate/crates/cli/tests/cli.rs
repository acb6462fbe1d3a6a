use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--set",
    "world.samples_per_class=20",
    "--set",
    "world.num_classes_total=4",
    "--set",
    "world.num_known=2",
    "--set",
    "world.dim_input=8",
    "--set",
    "train.epochs=3",
    "--set",
    "train.warmup_epochs_ova=1",
    "--set",
    "train.batch_size=8",
    "--set",
    "train.mu=2",
];

fn rpc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rpc")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_train_eval_flow() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");

    let o = rpc(&[&["gen-data", "--seed", "3", "--out", path(&data)], SMALL].concat());
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    assert!(data.join("config.toml").exists());

    let dataset = data.join("dataset.csv");
    let o = rpc(&[
        "train",
        "--config",
        path(&data.join("config.toml")),
        "--dataset",
        path(&dataset),
        "--out",
        path(&run),
    ]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    let stdout = text(&o.stdout);
    assert!(stdout.contains("trained 3 epochs"), "{stdout}");
    let final_line = stdout.lines().find(|l| l.starts_with("final:")).unwrap().to_string();
    for f in ["metrics.csv", "summary.json", "final.ckpt"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    assert_eq!(fs::read_to_string(run.join("metrics.csv")).unwrap().lines().count(), 4);

    let eval_dir = tmp.path().join("eval");
    let o = rpc(&[
        "eval",
        "--checkpoint",
        path(&run.join("final.ckpt")),
        "--dataset",
        path(&dataset),
        "--out",
        path(&eval_dir),
    ]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    assert_eq!(format!("final: {}", text(&o.stdout).trim()), final_line);
    let json: serde_json::Value = serde_json::from_slice(&fs::read(eval_dir.join("eval.json")).unwrap()).unwrap();
    assert!(json["all"].as_f64().is_some());

    // Without a dataset the world is rebuilt from the checkpoint's config.
    let o = rpc(&["eval", "--checkpoint", path(&run.join("final.ckpt"))]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    assert_eq!(format!("final: {}", text(&o.stdout).trim()), final_line);
}

#[test]
fn same_seed_writes_identical_summaries() {
    let tmp = tempfile::tempdir().unwrap();
    let mut summaries = Vec::new();
    for name in ["a", "b"] {
        let dir = tmp.path().join(name);
        let o = rpc(&[&["train", "--seed", "7", "--out", path(&dir)], SMALL].concat());
        assert_eq!(code(&o), 0, "{}", text(&o.stderr));
        summaries.push(fs::read(dir.join("summary.json")).unwrap());
    }
    assert_eq!(summaries[0], summaries[1]);
}

#[test]
fn interrupted_training_resumes() {
    let tmp = tempfile::tempdir().unwrap();
    let whole = tmp.path().join("whole");
    let part = tmp.path().join("part");
    let every = ["--set", "train.checkpoint_every=1"];
    let o = rpc(&[&["train", "--out", path(&whole)], SMALL, &every].concat());
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    let o = rpc(&[&["train", "--out", path(&part), "--stop-after", "2"], SMALL, &every].concat());
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    let ck = part.join("checkpoints").join("epoch_0002.ckpt");
    let o = rpc(&[&["train", "--out", path(&part), "--resume", path(&ck)], SMALL, &every].concat());
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    assert_eq!(
        fs::read(whole.join("metrics.csv")).unwrap(),
        fs::read(part.join("metrics.csv")).unwrap()
    );
}

#[test]
fn unknown_config_key_is_named() {
    let o = rpc(&["train", "--set", "loss.lambda7=1"]);
    assert_eq!(code(&o), 1);
    assert!(text(&o.stderr).contains("lambda7"), "{}", text(&o.stderr));
}

#[test]
fn invalid_value_is_a_usage_error() {
    let o = rpc(&["gen-data", "--set", "loss.alpha=3"]);
    assert_eq!(code(&o), 1, "{}", text(&o.stderr));
}

#[test]
fn missing_files_exit_3() {
    let o = rpc(&["eval", "--checkpoint", "/nonexistent/final.ckpt"]);
    assert_eq!(code(&o), 3, "{}", text(&o.stderr));
    let o = rpc(&["train", "--config", "/nonexistent/cfg.toml"]);
    assert_eq!(code(&o), 3, "{}", text(&o.stderr));
}

#[test]
fn malformed_dataset_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.csv");
    fs::write(&bad, "not,a,dataset\n1,2\n").unwrap();
    let o = rpc(&["train", "--dataset", path(&bad), "--out", path(&tmp.path().join("r"))]);
    assert_eq!(code(&o), 3, "{}", text(&o.stderr));
}

#[test]
fn gradcheck_passes() {
    let o = rpc(&["gradcheck", "--instances", "3"]);
    assert_eq!(code(&o), 0, "{}{}", text(&o.stdout), text(&o.stderr));
    assert!(text(&o.stdout).contains("unsup_contrastive"), "{}", text(&o.stdout));
}

#[test]
fn bad_arguments_exit_1() {
    assert_eq!(code(&rpc(&["frobnicate"])), 1);
    assert_eq!(code(&rpc(&["gradcheck", "--step", "1"])), 1);
    assert_eq!(code(&rpc(&["sweep", "--param", "gamma", "--grid", "0.1"])), 1);
    assert_eq!(code(&rpc(&["--help"])), 0);
}

#[test]
fn sweep_writes_one_row_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let o = rpc(&[
        &["sweep", "--param", "alpha", "--grid", "0,0.3", "--out", path(tmp.path())],
        SMALL,
    ]
    .concat());
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    let csv = fs::read_to_string(tmp.path().join("sweep_alpha.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");
    assert!(csv.starts_with("alpha,all,old,new"));
}
