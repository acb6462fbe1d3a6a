//! Clustering accuracy under an optimal cluster-to-class assignment, plus
//! the ablation and sweep harnesses built on top of training runs.

use std::fmt::Write as _;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{predict_clusters, ModelParams};
use crate::synthdata::{generate_world, GcdSplit, HiddenTruth};
use crate::trainer::{run_training, RunOptions};

/// Solves the square assignment problem, maximizing the total weight.
/// Returns `perm` with row `i` assigned to column `perm[i]`.
pub fn hungarian_match(weights: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = weights.len();
    if let Some(row) = weights.iter().find(|r| r.len() != n) {
        return Err(Error::dim("hungarian_match", format!("{n} rows but a row of length {}", row.len())));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let max = weights.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
    let cost = |i: usize, j: usize| max - weights[i][j];

    // Shortest augmenting paths with potentials; 1-based with a sentinel
    // column 0.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[owner[j] - 1] = j - 1;
    }
    Ok(perm)
}

/// Deterministic value in `[0, 1)` (splitmix64 finalizer).
fn unit_hash(a: u64, b: u64) -> f64 {
    let mut z = a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_add(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

/// Predicted clusters, hidden classes and the cluster → class mapping.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterAssignment {
    pub predicted: Vec<usize>,
    pub truth: Vec<usize>,
    pub mapping: Vec<usize>,
}

impl ClusterAssignment {
    /// Matches clusters to classes over every sample jointly.
    pub fn new(predicted: &[usize], truth: &[usize], num_classes: usize) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(Error::dim(
                "ClusterAssignment",
                format!("{} predictions for {} labels", predicted.len(), truth.len()),
            ));
        }
        let k = predicted
            .iter()
            .chain(truth)
            .map(|&c| c + 1)
            .max()
            .unwrap_or(0)
            .max(num_classes);
        let mut counts = vec![vec![0.0; k]; k];
        let mut first = vec![None; k];
        for (i, (&p, &t)) in predicted.iter().zip(truth).enumerate() {
            counts[p][t] += 1.0;
            first[p].get_or_insert(i);
        }
        // Counts are integers, so perturbations summing below 1 only break
        // ties. Keying them on each cluster's first sample rather than its
        // id makes Old/New independent of how clusters are numbered.
        let eps = 0.5 / k as f64;
        for (p, row) in counts.iter_mut().enumerate() {
            if let Some(i) = first[p] {
                for (t, c) in row.iter_mut().enumerate() {
                    *c += eps * unit_hash(i as u64, t as u64);
                }
            }
        }
        Ok(ClusterAssignment {
            predicted: predicted.to_vec(),
            truth: truth.to_vec(),
            mapping: hungarian_match(&counts)?,
        })
    }

    pub fn is_correct(&self, i: usize) -> bool {
        self.mapping[self.predicted[i]] == self.truth[i]
    }
}

/// All/Old/New accuracy. Subsets with no samples are `None`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcdAccuracy {
    pub all: f64,
    pub old: Option<f64>,
    pub new: Option<f64>,
}

/// Accuracy of a joint assignment over all samples, then split by
/// `known_mask`.
pub fn gcd_accuracy(assignment: &ClusterAssignment, known_mask: &[bool]) -> Result<GcdAccuracy> {
    let n = assignment.truth.len();
    if known_mask.len() != n {
        return Err(Error::dim("gcd_accuracy", format!("{} mask entries for {n} samples", known_mask.len())));
    }
    if n == 0 {
        return Err(Error::Contract("gcd_accuracy on an empty set".into()));
    }
    let (mut hit, mut hit_old, mut n_old) = (0usize, 0usize, 0usize);
    for (i, &known) in known_mask.iter().enumerate() {
        let ok = assignment.is_correct(i);
        hit += ok as usize;
        if known {
            n_old += 1;
            hit_old += ok as usize;
        }
    }
    let frac = |h: usize, d: usize| (d > 0).then(|| h as f64 / d as f64);
    Ok(GcdAccuracy {
        all: hit as f64 / n as f64,
        old: frac(hit_old, n_old),
        new: frac(hit - hit_old, n - n_old),
    })
}

/// Clusters the unlabeled pool with `params` and scores it against the
/// hidden truth.
pub fn evaluate(params: &ModelParams, split: &GcdSplit, truth: &HiddenTruth) -> Result<GcdAccuracy> {
    let predicted = predict_clusters(params, &split.unlabeled_x)?;
    let a = ClusterAssignment::new(&predicted, &truth.labels, split.num_classes_total)?;
    gcd_accuracy(&a, &truth.known_mask)
}

/// Components an ablation variant can switch off.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    /// Embedding fusion (`α = 0`); the alignment loss stays on.
    Fusion,
    /// Behavioral alignment loss (`λ₁ = 0`).
    Align,
    /// Relational discovery loss (`λ₂ = 0`).
    Discover,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub name: String,
    pub disabled: Vec<Component>,
}

impl AblationSpec {
    pub fn full() -> Self {
        AblationSpec {
            name: "RPC (full)".into(),
            disabled: vec![],
        }
    }

    /// The full method followed by one variant per removed component.
    pub fn standard() -> Vec<Self> {
        let one = |name: &str, c| AblationSpec {
            name: name.into(),
            disabled: vec![c],
        };
        vec![
            Self::full(),
            one("w/o Embedding Fusion", Component::Fusion),
            one("w/o L_align", Component::Align),
            one("w/o L_discover", Component::Discover),
        ]
    }

    /// Looks up a variant of [`AblationSpec::standard`] by name or by a
    /// short alias (`full`, `fusion`, `align`, `discover`).
    pub fn by_name(name: &str) -> Option<Self> {
        let alias = match name {
            "full" => "RPC (full)",
            "fusion" => "w/o Embedding Fusion",
            "align" => "w/o L_align",
            "discover" => "w/o L_discover",
            other => other,
        };
        Self::standard().into_iter().find(|s| s.name == alias)
    }

    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        for c in &self.disabled {
            match c {
                Component::Fusion => cfg.loss.alpha = 0.0,
                Component::Align => cfg.loss.lambda1 = 0.0,
                Component::Discover => cfg.loss.lambda2 = 0.0,
            }
        }
        cfg
    }
}

/// Mean and sample standard deviation of one metric over seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Stat { mean, std })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    /// One entry per seed; failures keep their error message.
    pub runs: Vec<std::result::Result<GcdAccuracy, String>>,
}

impl AblationRow {
    fn collect(&self, f: impl Fn(&GcdAccuracy) -> Option<f64>) -> Vec<f64> {
        self.runs.iter().filter_map(|r| r.as_ref().ok()).filter_map(f).collect()
    }

    pub fn all(&self) -> Option<Stat> {
        Stat::of(&self.collect(|a| Some(a.all)))
    }

    pub fn old(&self) -> Option<Stat> {
        Stat::of(&self.collect(|a| a.old))
    }

    pub fn new(&self) -> Option<Stat> {
        Stat::of(&self.collect(|a| a.new))
    }

    pub fn failures(&self) -> usize {
        self.runs.iter().filter(|r| r.is_err()).count()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

fn pct(s: Option<Stat>) -> (String, String) {
    match s {
        Some(s) => (format!("{:.2}", 100.0 * s.mean), format!("{:.2}", 100.0 * s.std)),
        None => (String::new(), String::new()),
    }
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,seeds,all_mean,all_std,old_mean,old_std,new_mean,new_std,failures\n");
        for r in &self.rows {
            let (a, sa) = pct(r.all());
            let (o, so) = pct(r.old());
            let (n, sn) = pct(r.new());
            let _ = writeln!(
                out,
                "{},{},{a},{sa},{o},{so},{n},{sn},{}",
                r.name,
                self.seeds.len(),
                r.failures()
            );
        }
        out
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(7);
        let mut out = format!("{:<width$}  {:>14}  {:>14}  {:>14}\n", "variant", "All", "Old", "New");
        let cell = |s: Option<Stat>| match s {
            Some(s) => format!("{:.2} ± {:.2}", 100.0 * s.mean, 100.0 * s.std),
            None => "-".into(),
        };
        for r in &self.rows {
            let _ = write!(
                out,
                "{:<width$}  {:>14}  {:>14}  {:>14}",
                r.name,
                cell(r.all()),
                cell(r.old()),
                cell(r.new())
            );
            if r.failures() > 0 {
                let _ = write!(out, "  ({} failed)", r.failures());
            }
            out.push('\n');
        }
        out
    }
}

/// Trains `cfg` on its own world and returns the final accuracy.
pub fn train_and_score(cfg: &RunConfig) -> Result<GcdAccuracy> {
    let world = generate_world(&cfg.world_config())?;
    let (split, truth) = (&world.split, &world.truth);
    let mut eval_fn = |p: &ModelParams| evaluate(p, split, truth);
    let opts = RunOptions {
        eval_every: 0,
        ..RunOptions::default()
    };
    let result = run_training(cfg, split, &opts, Some(&mut eval_fn))?;
    result
        .metrics
        .last()
        .and_then(|m| m.accuracy)
        .map_or_else(|| evaluate(&result.state.params, split, truth), Ok)
}

/// Runs `jobs` on up to `threads` worker threads, keeping input order.
fn run_parallel<T: Send>(jobs: Vec<Box<dyn FnOnce() -> T + Send + '_>>, threads: usize) -> Vec<T> {
    let threads = threads.max(1);
    let mut results: Vec<Option<T>> = (0..jobs.len()).map(|_| None).collect();
    let queue = std::sync::Mutex::new(jobs.into_iter().enumerate().collect::<Vec<_>>());
    let out = std::sync::Mutex::new(&mut results);
    thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let job = queue.lock().expect("queue lock").pop();
                let Some((i, job)) = job else { break };
                let r = job();
                out.lock().expect("result lock")[i] = Some(r);
            });
        }
    });
    results.into_iter().map(|r| r.expect("every job ran")).collect()
}

/// Worker count for harness runs: the machine's parallelism.
pub fn default_threads() -> usize {
    thread::available_parallelism().map_or(1, |n| n.get())
}

/// Trains every variant under every seed. Failed runs are recorded in the
/// table rather than aborting it.
pub fn run_ablation(base: &RunConfig, specs: &[AblationSpec], seeds: &[u64], threads: usize) -> AblationTable {
    let mut jobs: Vec<Box<dyn FnOnce() -> std::result::Result<GcdAccuracy, String> + Send>> = Vec::new();
    for spec in specs {
        for &seed in seeds {
            let mut cfg = spec.apply(base);
            cfg.seed = seed;
            jobs.push(Box::new(move || train_and_score(&cfg).map_err(|e| e.to_string())));
        }
    }
    let mut results = run_parallel(jobs, threads).into_iter();
    AblationTable {
        seeds: seeds.to_vec(),
        rows: specs
            .iter()
            .map(|s| AblationRow {
                name: s.name.clone(),
                runs: results.by_ref().take(seeds.len()).collect(),
            })
            .collect(),
    }
}

/// Hyperparameters [`run_sweep`] can vary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Lambda1,
    Lambda2,
    Alpha,
}

impl SweepParam {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "lambda1" => Ok(SweepParam::Lambda1),
            "lambda2" => Ok(SweepParam::Lambda2),
            "alpha" => Ok(SweepParam::Alpha),
            other => Err(Error::Config(format!(
                "unknown sweep parameter `{other}` (expected lambda1, lambda2 or alpha)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Lambda1 => "lambda1",
            SweepParam::Lambda2 => "lambda2",
            SweepParam::Alpha => "alpha",
        }
    }

    pub fn set(self, cfg: &mut RunConfig, value: f64) {
        match self {
            SweepParam::Lambda1 => cfg.loss.lambda1 = value,
            SweepParam::Lambda2 => cfg.loss.lambda2 = value,
            SweepParam::Alpha => cfg.loss.alpha = value,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub result: std::result::Result<GcdAccuracy, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepCurve {
    pub param: SweepParam,
    pub rows: Vec<SweepRow>,
}

impl SweepCurve {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{},all,old,new,error\n", self.param.name());
        let opt = |v: Option<f64>| v.map(|v| format!("{v}")).unwrap_or_default();
        for r in &self.rows {
            match &r.result {
                Ok(a) => {
                    let _ = writeln!(out, "{},{},{},{},", r.value, a.all, opt(a.old), opt(a.new));
                }
                Err(e) => {
                    let _ = writeln!(out, "{},,,,{}", r.value, e.replace([',', '\n'], " "));
                }
            }
        }
        out
    }
}

/// One training run per grid value, in grid order.
pub fn run_sweep(base: &RunConfig, param: SweepParam, grid: &[f64], threads: usize) -> Result<SweepCurve> {
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let jobs = grid
        .iter()
        .map(|&value| {
            let mut cfg = base.clone();
            param.set(&mut cfg, value);
            Box::new(move || train_and_score(&cfg).map_err(|e| e.to_string()))
                as Box<dyn FnOnce() -> std::result::Result<GcdAccuracy, String> + Send>
        })
        .collect();
    let results = run_parallel(jobs, threads);
    Ok(SweepCurve {
        param,
        rows: grid
            .iter()
            .zip(results)
            .map(|(&value, result)| SweepRow { value, result })
            .collect(),
    })
}
