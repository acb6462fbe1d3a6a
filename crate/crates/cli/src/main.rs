//! `rpc`: generate synthetic worlds, train, evaluate, check gradients and
//! run ablations or sweeps.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 numerical failure,
//! 3 I/O or file-format error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rpc_gcd::config::RunConfig;
use rpc_gcd::error::Error;
use rpc_gcd::eval::{self, AblationSpec, GcdAccuracy, SweepParam};
use rpc_gcd::gradcheck;
use rpc_gcd::model::{Checkpoint, ModelParams};
use rpc_gcd::synthdata::{self, GcdSplit, HiddenTruth};
use rpc_gcd::trainer::{self, RunOptions};

const DATASET_FILE: &str = "dataset.csv";

#[derive(Parser)]
#[command(name = "rpc", version, about = "Relational pattern consistency for category discovery on synthetic worlds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML or JSON config; a run's summary.json is accepted too.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Root seed, applied after the config file and `--set`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Override a config key, e.g. `--set loss.lambda1=0.25`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a world and write the dataset plus its hidden labels.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train on a dataset file, or on the world the config describes.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset written by `gen-data`.
        #[arg(long, value_name = "PATH")]
        dataset: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
        /// Stop after this many completed epochs.
        #[arg(long, value_name = "N")]
        stop_after: Option<usize>,
        /// Evaluate every N epochs (0: final epoch only).
        #[arg(long, default_value_t = 1, value_name = "N")]
        eval_every: usize,
    },
    /// Score a checkpoint on a dataset's unlabeled pool.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Dataset with a `.truth` sibling; defaults to regenerating the
        /// world recorded in the checkpoint.
        #[arg(long, value_name = "PATH")]
        dataset: Option<PathBuf>,
        /// Also write `eval.json` here.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every loss.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
    /// Train each ablation variant under several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated variants: full, fusion, align, discover.
        #[arg(long, value_delimiter = ',', default_value = "full,fusion,align,discover")]
        variants: Vec<String>,
        /// Comma-separated seeds; defaults to three seeds from the root seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Vary one loss weight over a grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// lambda1, lambda2 or alpha.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<f64>,
        #[arg(long)]
        threads: Option<usize>,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Numerical(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Numerical(_) => 2,
            Failure::Io(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Numerical(m) | Failure::Io(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            _ if e.is_numerical() => Failure::Numerical(msg),
            Error::Io { .. } | Error::Parse { .. } => Failure::Io(msg),
            _ => Failure::Usage(msg),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::GenData { common } => gen_data(&common),
        Command::Train {
            common,
            dataset,
            resume,
            stop_after,
            eval_every,
        } => train(&common, dataset.as_deref(), resume, stop_after, eval_every),
        Command::Eval { checkpoint, dataset, out } => evaluate(&checkpoint, dataset.as_deref(), out.as_deref()),
        Command::Gradcheck {
            common,
            instances,
            step,
        } => run_gradcheck(&common, instances, step),
        Command::Ablate {
            common,
            variants,
            seeds,
            threads,
        } => ablate(&common, &variants, seeds, threads),
        Command::Sweep {
            common,
            param,
            grid,
            threads,
        } => sweep(&common, &param, &grid, threads),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn load_config(c: &Common) -> Result<RunConfig, Failure> {
    let mut overrides = c.sets.clone();
    if let Some(seed) = c.seed {
        overrides.push(format!("seed={seed}"));
    }
    let cfg = match &c.config {
        Some(path) => RunConfig::load(path, &overrides)?,
        None => RunConfig::from_overrides(&overrides)?,
    };
    Ok(cfg)
}

fn out_dir(c: &Common, default: &str) -> Result<PathBuf, Failure> {
    let dir = c.out.clone().unwrap_or_else(|| PathBuf::from(default));
    fs::create_dir_all(&dir).map_err(|e| Failure::Io(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CmdResult {
    fs::write(path, contents).map_err(|e| Failure::Io(format!("cannot write {}: {e}", path.display())))
}

fn fmt_acc(a: &GcdAccuracy) -> String {
    let pct = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{:.2}", 100.0 * v));
    format!("All {}  Old {}  New {}", pct(Some(a.all)), pct(a.old), pct(a.new))
}

fn gen_data(c: &Common) -> CmdResult {
    let cfg = load_config(c)?;
    let world = synthdata::generate_world(&cfg.world_config())?;
    let dir = out_dir(c, "data")?;
    let path = dir.join(DATASET_FILE);
    synthdata::save_dataset(&world.split, &path)?;
    synthdata::save_truth(&world.truth, &synthdata::truth_path(&path))?;
    write_file(&dir.join("config.toml"), cfg.to_toml_string())?;
    println!(
        "wrote {} ({} labeled, {} unlabeled, dim {})",
        path.display(),
        world.split.num_labeled(),
        world.split.num_unlabeled(),
        world.split.dim()
    );
    Ok(())
}

/// Dataset and, when available, its hidden labels.
fn load_data(path: &Path) -> Result<(GcdSplit, Option<HiddenTruth>), Failure> {
    let split = synthdata::load_dataset(path)?;
    let tp = synthdata::truth_path(path);
    let truth = if tp.exists() { Some(synthdata::load_truth(&tp)?) } else { None };
    Ok((split, truth))
}

fn train(
    c: &Common,
    dataset: Option<&Path>,
    resume: Option<PathBuf>,
    stop_after: Option<usize>,
    eval_every: usize,
) -> CmdResult {
    let cfg = load_config(c)?;
    let (split, truth) = match dataset {
        Some(p) => load_data(p)?,
        None => {
            let w = synthdata::generate_world(&cfg.world_config())?;
            (w.split, Some(w.truth))
        }
    };
    let dir = out_dir(c, "run")?;
    let opts = RunOptions {
        out_dir: Some(dir.clone()),
        resume,
        stop_after,
        eval_every,
    };
    let mut eval_fn = |p: &ModelParams| eval::evaluate(p, &split, truth.as_ref().expect("checked"));
    let evaluator: Option<trainer::Evaluator> = if truth.is_some() { Some(&mut eval_fn) } else { None };
    let result = trainer::run_training(&cfg, &split, &opts, evaluator)?;
    println!(
        "trained {} epochs in {:.1}s; artifacts in {}",
        result.state.epoch,
        result.wall_seconds,
        dir.display()
    );
    if let Some(a) = result.metrics.last().and_then(|m| m.accuracy) {
        println!("final: {}", fmt_acc(&a));
    }
    Ok(())
}

fn evaluate(checkpoint: &Path, dataset: Option<&Path>, out: Option<&Path>) -> CmdResult {
    let ck = Checkpoint::load(checkpoint)?;
    let params = trainer::params_from_checkpoint(&ck)?;
    let (split, truth) = match dataset {
        Some(p) => {
            let (split, truth) = load_data(p)?;
            let truth = truth.ok_or_else(|| {
                Failure::Io(format!("{} has no hidden labels", synthdata::truth_path(p).display()))
            })?;
            (split, truth)
        }
        None => {
            let text = ck
                .meta("config")
                .ok_or_else(|| Failure::Usage("checkpoint records no config; pass --dataset".into()))?;
            let cfg = RunConfig::from_json_str(text, &[])?;
            let w = synthdata::generate_world(&cfg.world_config())?;
            (w.split, w.truth)
        }
    };
    let acc = eval::evaluate(&params, &split, &truth)?;
    println!("{}", fmt_acc(&acc));
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("cannot create {}: {e}", dir.display())))?;
        let json = serde_json::to_string_pretty(&acc).expect("accuracy serializes");
        write_file(&dir.join("eval.json"), json + "\n")?;
    }
    Ok(())
}

fn run_gradcheck(c: &Common, instances: usize, step: f64) -> CmdResult {
    if instances == 0 {
        return Err(Failure::Usage("--instances must be positive".into()));
    }
    if !(1e-7..=1e-3).contains(&step) {
        return Err(Failure::Usage(format!("--step must lie in [1e-7, 1e-3], got {step}")));
    }
    let cfg = load_config(c)?;
    let rows = gradcheck::run_suite(&cfg.loss, instances, step, cfg.seed)?;
    let table = gradcheck::format_table(&rows);
    print!("{table}");
    if let Some(dir) = &c.out {
        fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("cannot create {}: {e}", dir.display())))?;
        write_file(&dir.join("gradcheck.txt"), &table)?;
    }
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Numerical(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn ablate(c: &Common, variants: &[String], seeds: Vec<u64>, threads: Option<usize>) -> CmdResult {
    let cfg = load_config(c)?;
    let specs = variants
        .iter()
        .map(|v| {
            AblationSpec::by_name(v.trim())
                .ok_or_else(|| Failure::Usage(format!("unknown variant `{v}` (full, fusion, align, discover)")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let seeds = if seeds.is_empty() {
        (0..3).map(|i| cfg.seed.wrapping_add(i)).collect()
    } else {
        seeds
    };
    let dir = out_dir(c, "ablation")?;
    let table = eval::run_ablation(&cfg, &specs, &seeds, threads.unwrap_or_else(eval::default_threads));
    let text = table.to_text();
    print!("{text}");
    write_file(&dir.join("ablation.csv"), table.to_csv())?;
    write_file(&dir.join("ablation.txt"), &text)?;
    let failures: usize = table.rows.iter().map(|r| r.failures()).sum();
    if failures > 0 {
        return Err(Failure::Numerical(format!("{failures} ablation run(s) failed; see ablation.csv")));
    }
    Ok(())
}

fn sweep(c: &Common, param: &str, grid: &[f64], threads: Option<usize>) -> CmdResult {
    let cfg = load_config(c)?;
    let param = SweepParam::parse(param)?;
    for &v in grid {
        let mut probe = cfg.clone();
        param.set(&mut probe, v);
        probe.validate()?;
    }
    let dir = out_dir(c, "sweep")?;
    let curve = eval::run_sweep(&cfg, param, grid, threads.unwrap_or_else(eval::default_threads))?;
    let csv = curve.to_csv();
    print!("{csv}");
    write_file(&dir.join(format!("sweep_{}.csv", param.name())), &csv)?;
    let failed = curve.rows.iter().filter(|r| r.result.is_err()).count();
    if failed > 0 {
        return Err(Failure::Numerical(format!("{failed} sweep run(s) failed")));
    }
    Ok(())
}
