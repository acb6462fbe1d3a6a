//! Staged SGD training.
//!
//! Epochs before `warmup_epochs_ova` optimize the contrastive and
//! self-distillation baseline plus the one-vs-all head loss. Afterwards the
//! alignment and discovery terms switch on. Each step:
//!
//! 1. takes `B` labeled samples from the epoch's shuffled order and `μ·B`
//!    distinct unlabeled candidates (`μ` per labeled anchor);
//! 2. draws one weak and one strong augmentation shared by the whole batch;
//! 3. runs a gradient-free pass on the weak view for everything that acts
//!    as a target or weight ([`prepare_step`]);
//! 4. builds the objective on a fresh tape ([`step_objective`]), runs
//!    backward and applies SGD with momentum.
//!
//! The one-vs-all heads read a detached copy of the projections, so they
//! never move the encoder; with `λ₁ = λ₂ = 0` the backbone follows exactly
//! the baseline trajectory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::GcdAccuracy;
use crate::losses::{
    align_loss, behavioral_deltas, build_batch, classifier_losses, discovery_loss, pair_weights,
    sup_contrastive, total_loss, unsup_contrastive, BatchRow, FusedBatch, LossTerms,
};
use crate::model::{
    encode, log_soft_label, ova_bce_loss, ova_logits, ova_weights, project, relational_signature, soft_label,
    Checkpoint, KnownPrototypes, ModelParams, ModelVars, id_score, NORM_EPS,
};
use crate::rng;
use crate::synthdata::{Augmentation, GcdSplit, ViewKind};
use crate::tensor::{Tape, Tensor, Var};

/// Which objective a run optimizes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Baseline plus one-vs-all heads, fusion, alignment and discovery.
    #[default]
    Rpc,
    /// Contrastive and self-distillation terms only; no RPC graph nodes are
    /// ever built.
    Baseline,
}

/// How the discovery loss enters the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NewLossScale {
    /// The raw double sum.
    Sum,
    /// The double sum divided by `Σ_{i≠j} w_i w_j s_ij` of the current
    /// batch (a constant for the step), i.e. a weighted mean of signature
    /// distances.
    #[default]
    WeightedMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    /// Unlabeled candidates sampled per labeled anchor.
    pub mu: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_epochs_ova: usize,
    /// First epoch with the alignment loss; defaults to the end of warm-up.
    #[serde(default)]
    pub align_start_epoch: Option<usize>,
    /// First epoch with the discovery loss; defaults to the end of warm-up.
    #[serde(default)]
    pub new_start_epoch: Option<usize>,
    pub freeze_ova_after_warmup: bool,
    pub new_loss_scale: NewLossScale,
    /// Write a checkpoint every this many epochs (0: only the final one).
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            method: Method::Rpc,
            epochs: 50,
            batch_size: 32,
            mu: 4,
            lr0: 0.1,
            lr_min: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_epochs_ova: 10,
            align_start_epoch: None,
            new_start_epoch: None,
            freeze_ova_after_warmup: false,
            new_loss_scale: NewLossScale::WeightedMean,
            checkpoint_every: 10,
        }
    }

    pub fn paper() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 128,
            warmup_epochs_ova: 40,
            checkpoint_every: 20,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.mu == 0 {
            return bad("mu must be >= 1".into());
        }
        if !(self.lr0 > self.lr_min && self.lr_min >= 0.0 && self.lr0.is_finite()) {
            return bad(format!("need lr0 > lr_min >= 0, got {} and {}", self.lr0, self.lr_min));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.epochs > 0 && self.warmup_epochs_ova >= self.epochs {
            return bad(format!(
                "warmup_epochs_ova ({}) must be below epochs ({})",
                self.warmup_epochs_ova, self.epochs
            ));
        }
        Ok(())
    }

    pub fn align_start(&self) -> usize {
        self.align_start_epoch.unwrap_or(self.warmup_epochs_ova)
    }

    pub fn new_start(&self) -> usize {
        self.new_start_epoch.unwrap_or(self.warmup_epochs_ova)
    }
}

/// `lr_min + ½(lr0 − lr_min)(1 + cos(π·step/total))`; steps past `total`
/// stay at `lr_min`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64, lr_min: f64) -> f64 {
    if step >= total_steps {
        return if total_steps == 0 { lr0 } else { lr_min };
    }
    let t = step as f64 / total_steps as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Fraction of scores above 0.5.
pub fn rho_from_scores(s_id: &[f64]) -> f64 {
    if s_id.is_empty() {
        return 0.0;
    }
    s_id.iter().filter(|&&s| s > 0.5).count() as f64 / s_id.len() as f64
}

/// Share of the unlabeled pool the one-vs-all heads call in-distribution.
pub fn estimate_rho_id(params: &ModelParams, unlabeled: &Tensor) -> Result<f64> {
    if unlabeled.rows() == 0 {
        return Err(Error::Contract("estimate_rho_id on an empty pool".into()));
    }
    let s: Vec<f64> = ova_weights(params, unlabeled)?.iter().map(|w| w.w_old).collect();
    Ok(rho_from_scores(&s))
}

/// `p ← p − lr·buf` with `buf ← momentum·buf + grad + weight_decay·p`.
pub fn sgd_update(param: &mut Tensor, buf: &mut Tensor, grad: &Tensor, lr: f64, momentum: f64, weight_decay: f64) {
    for ((p, b), g) in param.data_mut().iter_mut().zip(buf.data_mut()).zip(grad.data()) {
        *b = momentum * *b + g + weight_decay * *p;
        *p -= lr * *b;
    }
}

/// Which optional terms a step computes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepFlags {
    pub ova: bool,
    pub align: bool,
    pub new: bool,
}

impl StepFlags {
    pub fn for_epoch(cfg: &RunConfig, epoch: usize) -> Self {
        if cfg.train.method == Method::Baseline {
            return StepFlags::default();
        }
        StepFlags {
            ova: !(cfg.train.freeze_ova_after_warmup && epoch >= cfg.train.warmup_epochs_ova),
            align: epoch >= cfg.train.align_start() && cfg.loss.lambda1 != 0.0,
            new: epoch >= cfg.train.new_start() && cfg.loss.lambda2 != 0.0,
        }
    }
}

/// Everything one step needs, with all targets and weights fixed.
#[derive(Clone, Debug)]
pub struct StepInputs {
    /// Weak view; labeled rows first, then `μ` candidates per anchor.
    pub x_weak: Tensor,
    pub x_strong: Tensor,
    pub labels: Vec<usize>,
    /// Soft labels of the weak view, used as distillation targets.
    pub targets: Tensor,
    /// Present when the alignment loss is active.
    pub batch: Option<FusedBatch>,
    /// Discovery pair weights over the unlabeled rows when that loss is
    /// active.
    pub new_pairs: Option<Tensor>,
    /// Divisor applied to the discovery loss.
    pub new_scale: f64,
    pub flags: StepFlags,
    /// Weak-view features of the labeled rows.
    pub labeled_features: Tensor,
}

impl StepInputs {
    pub fn num_labeled(&self) -> usize {
        self.labels.len()
    }
}

/// Gradient-free pass over the weak view: distillation targets, one-vs-all
/// weights, the fused batch and the discovery normalizer.
#[allow(clippy::too_many_arguments)]
pub fn prepare_step(
    params: &ModelParams,
    cfg: &RunConfig,
    x_weak: Tensor,
    x_strong: Tensor,
    labels: Vec<usize>,
    mu: usize,
    rho_id: f64,
    flags: StepFlags,
) -> Result<StepInputs> {
    let b = labels.len();
    let n = x_weak.rows();
    if x_strong.shape() != x_weak.shape() || n != b * (1 + mu) {
        return Err(Error::dim(
            "prepare_step",
            format!("views {:?}/{:?} for {b} anchors with mu {mu}", x_weak.shape(), x_strong.shape()),
        ));
    }
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false)?;
    let xv = tape.constant(x_weak.clone());
    let h = encode(&mut tape, &vars, xv)?;
    let p = soft_label(&mut tape, &vars, h, cfg.loss.tau_s)?;
    let targets = tape.value(p).clone();
    let hv = tape.value(h).clone();
    let labeled_features = hv.select_rows(&(0..b).collect::<Vec<_>>());

    let mut batch = None;
    let mut new_pairs = None;
    let mut new_scale = 1.0;
    if flags.align || flags.new {
        let z = project(&mut tape, &vars, h)?;
        let s = id_score(&mut tape, &vars, z)?;
        let s_unl = &tape.value(s).data()[b..];
        if flags.align {
            batch = Some(build_batch(b, s_unl, mu, rho_id)?);
        }
        if flags.new {
            let w_new: Vec<f64> = s_unl.iter().map(|s| 1.0 - s).collect();
            let hu = hv.select_rows(&(b..n).collect::<Vec<_>>());
            let pairs = pair_weights(&hu, &w_new, cfg.loss.tau_u)?;
            let total: f64 = pairs.data().iter().sum();
            if cfg.train.new_loss_scale == NewLossScale::WeightedMean && total > 0.0 {
                new_scale = total;
            }
            new_pairs = Some(pairs);
        }
    }
    Ok(StepInputs {
        x_weak,
        x_strong,
        labels,
        targets,
        batch,
        new_pairs,
        new_scale,
        flags,
        labeled_features,
    })
}

/// Loss nodes of one step.
#[derive(Clone, Copy, Debug)]
pub struct StepLosses {
    /// What backward runs on: the total plus the one-vs-all term.
    pub objective: Var,
    /// Representation plus classifier terms.
    pub baseline: Var,
    pub rep_u: Var,
    pub rep_s: Var,
    pub cls: Var,
    pub ova: Option<Var>,
    pub align: Option<Var>,
    pub new: Option<Var>,
}

fn tagged<T>(component: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| {
        if e.is_numerical() {
            Error::NonFiniteLoss {
                component,
                epoch: 0,
                step: 0,
            }
        } else {
            e
        }
    })
}

/// Builds the step objective on `tape` from bound parameters.
pub fn step_objective(tape: &mut Tape, vars: &ModelVars, inputs: &StepInputs, cfg: &RunConfig) -> Result<StepLosses> {
    let w = &cfg.loss;
    let b = inputs.num_labeled();
    let n = inputs.x_weak.rows();
    let num_known = tape.value(vars.ova_weight).cols();
    let lab: Vec<usize> = (0..b).collect();

    let (h_w, z_w, h_s, z_s) = tagged("forward", (|| {
        let xw = tape.constant(inputs.x_weak.clone());
        let xs = tape.constant(inputs.x_strong.clone());
        let h_w = encode(tape, vars, xw)?;
        let z_w = project(tape, vars, h_w)?;
        let h_s = encode(tape, vars, xs)?;
        let z_s = project(tape, vars, h_s)?;
        Ok((h_w, z_w, h_s, z_s))
    })())?;

    let zn_w = tagged("forward", tape.l2_normalize_rows(z_w, NORM_EPS))?;
    let zn_s = tagged("forward", tape.l2_normalize_rows(z_s, NORM_EPS))?;
    let rep_u = tagged("loss_rep_u", unsup_contrastive(tape, zn_s, zn_w, w.tau_u))?;

    let has_pair = (0..b).any(|i| (0..b).any(|j| i != j && inputs.labels[i] == inputs.labels[j]));
    let rep_s = if has_pair {
        tagged("loss_rep_s", (|| {
            let ls = tape.select_rows(zn_s, &lab)?;
            let lw = tape.select_rows(zn_w, &lab)?;
            sup_contrastive(tape, ls, lw, &inputs.labels, w.tau_s)
        })())?
    } else {
        tape.constant(Tensor::scalar(0.0))
    };

    let cls = tagged("loss_cls", (|| {
        let log_p = log_soft_label(tape, vars, h_s, w.tau_s)?;
        let labels: Vec<Option<usize>> = (0..n).map(|i| inputs.labels.get(i).copied()).collect();
        classifier_losses(tape, log_p, &inputs.targets, &labels, num_known, w.lambda, w.epsilon)
    })())?;

    let ova = if inputs.flags.ova {
        Some(tagged("loss_ova", (|| {
            let zl_w = tape.select_rows(z_w, &lab)?;
            let zl_s = tape.select_rows(z_s, &lab)?;
            let both = tape.concat_rows(&[zl_w, zl_s])?;
            let detached = tape.detach(both);
            let logits = ova_logits(tape, vars, detached)?;
            let labels: Vec<usize> = inputs.labels.iter().chain(&inputs.labels).copied().collect();
            ova_bce_loss(tape, logits, &labels)
        })())?)
    } else {
        None
    };

    let align = match (&inputs.batch, inputs.flags.align) {
        (Some(batch), true) if batch.mu_id > 0 => tagged("loss_align", (|| {
            let rows: Vec<usize> = batch
                .order
                .iter()
                .map(|r| match *r {
                    BatchRow::Labeled(i) => i,
                    BatchRow::Unlabeled(c) => b + c,
                })
                .collect();
            let fw = tape.select_rows(zn_w, &rows)?;
            let fs = tape.select_rows(zn_s, &rows)?;
            let (dl, du) = behavioral_deltas(tape, fw, fs, batch, w.alpha)?;
            align_loss(tape, dl, du, &batch.partner_weights(), batch.mu_id)
        })())?,
        _ => None,
    };

    let new = match &inputs.new_pairs {
        Some(pairs) if inputs.flags.new => Some(tagged("loss_new", (|| {
            let unl: Vec<usize> = (b..n).collect();
            let hu = tape.select_rows(h_w, &unl)?;
            let r = relational_signature(tape, vars, hu)?;
            let l = discovery_loss(tape, r, pairs)?;
            tape.scale(l, 1.0 / inputs.new_scale)
        })())?),
        _ => None,
    };

    let base_terms = LossTerms {
        rep_u,
        rep_s,
        cls,
        align: None,
        new: None,
    };
    let baseline = tagged("loss_total", total_loss(tape, &base_terms, w))?;
    let total = tagged(
        "loss_total",
        total_loss(tape, &LossTerms { align, new, ..base_terms }, w),
    )?;
    let objective = match ova {
        Some(o) => tagged("loss_total", tape.add(total, o))?,
        None => total,
    };
    Ok(StepLosses {
        objective,
        baseline,
        rep_u,
        rep_s,
        cls,
        ova,
        align,
        new,
    })
}

/// Per-epoch means of the step losses plus evaluation results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Learning rate at the epoch's first step.
    pub lr: f64,
    pub loss_total: f64,
    pub loss_rep_u: f64,
    pub loss_rep_s: f64,
    pub loss_cls: f64,
    pub loss_ova: Option<f64>,
    pub loss_align: Option<f64>,
    pub loss_new: Option<f64>,
    pub rho_id: f64,
    pub accuracy: Option<GcdAccuracy>,
    /// Representation plus classifier loss of every step.
    #[serde(skip)]
    pub step_baseline: Vec<f64>,
}

pub const METRICS_HEADER: &str =
    "epoch,lr,loss_total,loss_rep_u,loss_rep_s,loss_cls,loss_ova,loss_align,loss_new,rho_id,acc_all,acc_old,acc_new";

/// One CSV row per epoch; absent values are empty cells.
pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    let mut out = format!("{METRICS_HEADER}\n");
    for m in metrics {
        let acc = m.accuracy;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            m.epoch,
            m.lr,
            m.loss_total,
            m.loss_rep_u,
            m.loss_rep_s,
            m.loss_cls,
            opt(m.loss_ova),
            opt(m.loss_align),
            opt(m.loss_new),
            m.rho_id,
            opt(acc.map(|a| a.all)),
            opt(acc.and_then(|a| a.old)),
            opt(acc.and_then(|a| a.new)),
        );
    }
    out
}

/// Final summary: config echo, epochs run, final and best-by-All epoch.
pub fn summary_json(cfg: &RunConfig, metrics: &[EpochMetrics]) -> String {
    let best = metrics
        .iter()
        .filter(|m| m.accuracy.is_some())
        .fold(None::<&EpochMetrics>, |best, m| match best {
            Some(b) if b.accuracy.map(|a| a.all) >= m.accuracy.map(|a| a.all) => Some(b),
            _ => Some(m),
        });
    let v = serde_json::json!({
        "config": cfg.to_json_value(),
        "epochs_completed": metrics.len(),
        "final": metrics.last(),
        "best": best,
    });
    let mut s = serde_json::to_string_pretty(&v).expect("summary serializes");
    s.push('\n');
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    /// One buffer per trainable tensor.
    pub momentum: Vec<Tensor>,
    /// Epochs completed.
    pub epoch: usize,
    pub rho_id: f64,
    pub history: Vec<EpochMetrics>,
}

impl TrainState {
    pub fn new(cfg: &RunConfig, split: &GcdSplit) -> Self {
        let params = ModelParams::init(
            &cfg.model,
            split.dim(),
            split.num_classes_total,
            split.num_known,
            rng::derive_seed(cfg.seed, "train", 0),
        );
        let momentum = params.trainable().iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
        TrainState {
            params,
            momentum,
            epoch: 0,
            rho_id: cfg.loss.rho_id.unwrap_or(0.0),
            history: Vec::new(),
        }
    }

    pub fn to_checkpoint(&self, cfg: &RunConfig) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor)> = self
            .params
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        for (i, m) in self.momentum.iter().enumerate() {
            tensors.push((format!("momentum.{i}"), m.clone()));
        }
        let kp = serde_json::to_string(&self.params.known_prototypes).expect("enum serializes");
        Checkpoint {
            meta: vec![
                ("kind".into(), "train_state".into()),
                ("epoch".into(), self.epoch.to_string()),
                ("rho_id".into(), format!("{:?}", self.rho_id)),
                ("known_prototypes".into(), kp),
                ("config".into(), cfg.to_json_value().to_string()),
                ("history".into(), serde_json::to_string(&self.history).expect("metrics serialize")),
            ],
            tensors,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = |k: &str| {
            ck.meta(k)
                .ok_or_else(|| Error::parse("checkpoint", format!("missing meta `{k}`")))
        };
        let bad = |k: &str| Error::parse("checkpoint", format!("bad meta `{k}`"));
        let params = params_from_checkpoint(ck)?;
        let n = params.trainable().len();
        let momentum = (0..n)
            .map(|i| {
                ck.tensor(&format!("momentum.{i}"))
                    .cloned()
                    .ok_or_else(|| Error::parse("checkpoint", format!("missing tensor `momentum.{i}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainState {
            params,
            momentum,
            epoch: meta("epoch")?.parse().map_err(|_| bad("epoch"))?,
            rho_id: meta("rho_id")?.parse().map_err(|_| bad("rho_id"))?,
            history: serde_json::from_str(meta("history")?).map_err(|_| bad("history"))?,
        })
    }
}

/// Model parameters stored in a checkpoint.
pub fn params_from_checkpoint(ck: &Checkpoint) -> Result<ModelParams> {
    let kp: KnownPrototypes = match ck.meta("known_prototypes") {
        Some(s) => serde_json::from_str(s).map_err(|_| Error::parse("checkpoint", "bad meta `known_prototypes`"))?,
        None => KnownPrototypes::default(),
    };
    let params = ModelParams::from_named(&ck.tensors, kp)?;
    params.check_shapes()?;
    Ok(params)
}

/// Batch geometry for a split: `(B, μ, steps per epoch)`. `B` and `μ` are
/// reduced when the pools are too small for the configured values.
pub fn batch_geometry(cfg: &RunConfig, split: &GcdSplit) -> Result<(usize, usize, usize)> {
    let (n_lab, n_unl) = (split.num_labeled(), split.num_unlabeled());
    let b = cfg.train.batch_size.min(n_lab);
    if b < 2 {
        return Err(Error::Config(format!("need at least 2 labeled samples, have {n_lab}")));
    }
    let mu = cfg.train.mu.min(n_unl / b);
    if mu == 0 {
        return Err(Error::Config(format!(
            "unlabeled pool of {n_unl} cannot give every one of {b} anchors a candidate"
        )));
    }
    Ok((b, mu, n_lab / b))
}

fn update_feature_means(params: &mut ModelParams, features: &Tensor, labels: &[usize]) {
    let d = features.cols();
    for c in 0..params.num_known() {
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if rows.is_empty() {
            continue;
        }
        let mut mean = vec![0.0; d];
        for &r in &rows {
            mean.iter_mut().zip(features.row(r)).for_each(|(m, v)| *m += v);
        }
        let k = rows.len() as f64;
        for (m, cur) in mean.iter().zip(params.feature_means.row_mut(c)) {
            *cur = 0.9 * *cur + 0.1 * (m / k);
        }
    }
}

pub type Evaluator<'a> = &'a mut dyn FnMut(&ModelParams) -> Result<GcdAccuracy>;

#[derive(Default)]
struct Accum {
    sum: f64,
    count: usize,
}

impl Accum {
    fn add(&mut self, v: f64) {
        self.sum += v;
        self.count += 1;
    }

    fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

/// Runs one epoch and appends its metrics to `state.history`. Parameters
/// are updated step by step; on error they hold the last good values.
pub fn train_epoch(
    state: &mut TrainState,
    split: &GcdSplit,
    cfg: &RunConfig,
    evaluate: Option<Evaluator>,
) -> Result<EpochMetrics> {
    let e = state.epoch;
    let (b, mu, steps) = batch_geometry(cfg, split)?;
    let total_steps = cfg.train.epochs * steps;
    let flags = StepFlags::for_epoch(cfg, e);
    let rho = match cfg.loss.rho_id {
        Some(r) => r,
        None if cfg.train.method == Method::Rpc => estimate_rho_id(&state.params, &split.unlabeled_x)?,
        None => 0.0,
    };
    state.rho_id = rho;

    let mut rng = rng::stream(cfg.seed, "train.epoch", e as u64);
    let mut order: Vec<usize> = (0..split.num_labeled()).collect();
    order.shuffle(&mut rng);
    let dim = split.dim();

    let [mut total, mut rep_u, mut rep_s, mut cls, mut ova, mut align, mut new] =
        std::array::from_fn::<Accum, 7, _>(|_| Accum::default());
    let mut step_baseline = Vec::with_capacity(steps);
    let first_lr = cosine_lr(e * steps, total_steps, cfg.train.lr0, cfg.train.lr_min);

    for s in 0..steps {
        let lab = &order[s * b..(s + 1) * b];
        let unl = index::sample(&mut rng, split.num_unlabeled(), b * mu).into_vec();
        let weak = Augmentation::sample(ViewKind::Weak, &cfg.augment, dim, &mut rng);
        let strong = Augmentation::sample(ViewKind::Strong, &cfg.augment, dim, &mut rng);

        let mut rows = split.labeled_x.select_rows(lab);
        let unl_x = split.unlabeled_x.select_rows(&unl);
        let mut data = rows.into_data();
        data.extend_from_slice(unl_x.data());
        rows = Tensor::new(b * (1 + mu), dim, data)?;
        let labels: Vec<usize> = lab.iter().map(|&i| split.labeled_y[i]).collect();

        let at = |err: Error| match err {
            Error::NonFiniteLoss { component, .. } => Error::NonFiniteLoss {
                component,
                epoch: e,
                step: s,
            },
            Error::NonFinite { .. } => Error::NonFiniteLoss {
                component: "forward",
                epoch: e,
                step: s,
            },
            other => other,
        };

        let inputs = prepare_step(
            &state.params,
            cfg,
            weak.apply_rows(&rows),
            strong.apply_rows(&rows),
            labels,
            mu,
            rho,
            flags,
        )
        .map_err(at)?;

        let mut tape = Tape::new();
        let vars = state.params.bind(&mut tape, true)?;
        let losses = step_objective(&mut tape, &vars, &inputs, cfg).map_err(at)?;
        tape.backward(losses.objective)?;

        let frozen = [vars.ova_weight, vars.ova_bias];
        let grads: Vec<Option<Tensor>> = vars
            .trainable()
            .iter()
            .map(|&v| {
                if !flags.ova && frozen.contains(&v) {
                    None
                } else {
                    tape.grad(v).cloned()
                }
            })
            .collect();
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                component: "gradient",
                epoch: e,
                step: s,
            });
        }
        let lr = cosine_lr(e * steps + s, total_steps, cfg.train.lr0, cfg.train.lr_min);
        let params = state.params.trainable_mut();
        for ((p, buf), g) in params.into_iter().zip(&mut state.momentum).zip(&grads) {
            if let Some(g) = g {
                sgd_update(p, buf, g, lr, cfg.train.momentum, cfg.train.weight_decay);
            }
        }
        if state.params.known_prototypes == KnownPrototypes::FeatureMean {
            update_feature_means(&mut state.params, &inputs.labeled_features, &inputs.labels);
        }

        let val = |v: Var| tape.value(v).item();
        total.add(val(losses.objective));
        rep_u.add(val(losses.rep_u));
        rep_s.add(val(losses.rep_s));
        cls.add(val(losses.cls));
        losses.ova.map(|v| ova.add(val(v)));
        losses.align.map(|v| align.add(val(v)));
        losses.new.map(|v| new.add(val(v)));
        step_baseline.push(val(losses.baseline));
    }

    let accuracy = match evaluate {
        Some(f) => Some(f(&state.params)?),
        None => None,
    };
    let m = EpochMetrics {
        epoch: e,
        lr: first_lr,
        loss_total: total.mean().unwrap_or(0.0),
        loss_rep_u: rep_u.mean().unwrap_or(0.0),
        loss_rep_s: rep_s.mean().unwrap_or(0.0),
        loss_cls: cls.mean().unwrap_or(0.0),
        loss_ova: ova.mean(),
        loss_align: align.mean(),
        loss_new: new.mean(),
        rho_id: rho,
        accuracy,
        step_baseline,
    };
    state.epoch += 1;
    state.history.push(m.clone());
    Ok(m)
}

/// Where and how [`run_training`] persists its artifacts.
#[derive(Clone, Debug)]
pub struct RunOptions {
    /// Directory for metrics, summary and checkpoints; nothing is written
    /// when absent.
    pub out_dir: Option<PathBuf>,
    /// Checkpoint to continue from.
    pub resume: Option<PathBuf>,
    /// Stop after this many completed epochs (simulates an interruption).
    pub stop_after: Option<usize>,
    /// Evaluate every this many epochs; the final epoch is always
    /// evaluated. 0 evaluates only the final epoch.
    pub eval_every: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            out_dir: None,
            resume: None,
            stop_after: None,
            eval_every: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub state: TrainState,
    pub metrics: Vec<EpochMetrics>,
    pub wall_seconds: f64,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TIMING_FILE: &str = "timing.json";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const LAST_GOOD_CHECKPOINT: &str = "last_good.ckpt";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("epoch_{epoch:04}.ckpt"))
}

/// Trains for `cfg.train.epochs` epochs (or until `opts.stop_after`),
/// evaluating with `evaluate` when given, and writes artifacts under
/// `opts.out_dir`.
pub fn run_training(
    cfg: &RunConfig,
    split: &GcdSplit,
    opts: &RunOptions,
    mut evaluate: Option<Evaluator>,
) -> Result<RunResult> {
    cfg.validate()?;
    let start = Instant::now();
    let mut state = match &opts.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let saved = ck.meta("config").unwrap_or_default();
            if saved != cfg.to_json_value().to_string() {
                return Err(Error::Config(format!(
                    "checkpoint {} was written by a different config",
                    path.display()
                )));
            }
            TrainState::from_checkpoint(&ck)?
        }
        None => TrainState::new(cfg, split),
    };
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
    }

    let end = opts.stop_after.map_or(cfg.train.epochs, |s| s.min(cfg.train.epochs));
    while state.epoch < end {
        let e = state.epoch;
        let due = e + 1 == cfg.train.epochs || (opts.eval_every > 0 && (e + 1) % opts.eval_every == 0);
        let eval_now: Option<Evaluator> = match (&mut evaluate, due) {
            (Some(f), true) => Some(&mut **f),
            _ => None,
        };
        if let Err(err) = train_epoch(&mut state, split, cfg, eval_now) {
            if err.is_numerical() {
                if let Some(dir) = &opts.out_dir {
                    state.to_checkpoint(cfg).save(&dir.join(LAST_GOOD_CHECKPOINT))?;
                }
            }
            return Err(err);
        }
        if let Some(dir) = &opts.out_dir {
            let every = cfg.train.checkpoint_every;
            if every > 0 && state.epoch % every == 0 {
                state.to_checkpoint(cfg).save(&checkpoint_path(dir, state.epoch))?;
            }
        }
    }

    let wall_seconds = start.elapsed().as_secs_f64();
    if let Some(dir) = &opts.out_dir {
        write(&dir.join(METRICS_FILE), metrics_csv(&state.history))?;
        write(&dir.join(SUMMARY_FILE), summary_json(cfg, &state.history))?;
        write(
            &dir.join(TIMING_FILE),
            format!("{{\n  \"wall_seconds\": {wall_seconds}\n}}\n"),
        )?;
        if state.epoch == cfg.train.epochs {
            state.to_checkpoint(cfg).save(&dir.join(FINAL_CHECKPOINT))?;
        }
    }
    Ok(RunResult {
        metrics: state.history.clone(),
        state,
        wall_seconds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_world, WorldConfig};

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.1, 0.0), 0.1);
        assert_eq!(cosine_lr(100, 100, 0.1, 0.001), 0.001);
        assert_eq!(cosine_lr(150, 100, 0.1, 0.001), 0.001);
        assert!((cosine_lr(50, 100, 0.1, 0.001) - 0.0505).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for s in 0..=40 {
            let lr = cosine_lr(s, 40, 0.1, 0.01);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn rho_threshold_examples() {
        assert_eq!(rho_from_scores(&[0.9, 0.8, 0.2, 0.1]), 0.5);
        assert_eq!(rho_from_scores(&[1.0; 4]), 1.0);
        assert_eq!(rho_from_scores(&[0.0; 4]), 0.0);
        let b = build_batch(2, &[0.0; 8], 4, rho_from_scores(&[0.0; 4])).unwrap();
        assert_eq!(b.mu_id, 0);
    }

    #[test]
    fn sgd_matches_formula() {
        let mut p = Tensor::row_vector(vec![1.0, -2.0]);
        let mut buf = Tensor::row_vector(vec![0.5, 0.0]);
        let g = Tensor::row_vector(vec![0.1, 0.2]);
        sgd_update(&mut p, &mut buf, &g, 0.1, 0.9, 0.01);
        // p − lr·(momentum·buf + grad + wd·p)
        let want0 = 1.0 - 0.1 * (0.9 * 0.5 + 0.1 + 0.01 * 1.0);
        let want1 = -2.0 - 0.1 * (0.0 + 0.2 + 0.01 * -2.0);
        assert!((p.data()[0] - want0).abs() < 1e-15);
        assert!((p.data()[1] - want1).abs() < 1e-15);
    }

    fn tiny() -> (RunConfig, GcdSplit) {
        let mut cfg = RunConfig::default();
        cfg.world = WorldConfig {
            num_classes_total: 4,
            num_known: 2,
            dim_input: 6,
            samples_per_class: 10,
            class_separation: 8.0,
            labeled_fraction: 0.5,
            seed: 0,
        };
        cfg.model.hidden_dim = 8;
        cfg.model.feature_dim = 6;
        cfg.model.proj_hidden_dim = 8;
        cfg.model.proj_dim = 5;
        cfg.train.epochs = 3;
        cfg.train.warmup_epochs_ova = 1;
        cfg.train.batch_size = 4;
        let world = generate_world(&cfg.world_config()).unwrap();
        (cfg, world.split)
    }

    #[test]
    fn zero_epochs_returns_initial_state() {
        let (mut cfg, split) = tiny();
        cfg.train.epochs = 0;
        cfg.train.warmup_epochs_ova = 0;
        let r = run_training(&cfg, &split, &RunOptions::default(), None).unwrap();
        assert!(r.metrics.is_empty());
        assert_eq!(r.state.params, TrainState::new(&cfg, &split).params);
    }

    #[test]
    fn geometry_shrinks_to_small_pools() {
        let (cfg, split) = tiny();
        // 10 labeled, 30 unlabeled
        assert_eq!(batch_geometry(&cfg, &split).unwrap(), (4, 4, 2));
        let mut big = cfg.clone();
        big.train.batch_size = 64;
        assert_eq!(batch_geometry(&big, &split).unwrap(), (10, 3, 1));
    }

    #[test]
    fn stages_switch_terms_on() {
        let (cfg, split) = tiny();
        let r = run_training(&cfg, &split, &RunOptions::default(), None).unwrap();
        assert!(r.metrics[0].loss_ova.is_some());
        assert!(r.metrics[0].loss_new.is_none());
        assert!(r.metrics[2].loss_new.is_some());
        assert!(r.metrics.iter().all(|m| m.loss_total.is_finite()));
    }

    #[test]
    fn checkpoint_state_roundtrip() {
        let (cfg, split) = tiny();
        let r = run_training(&cfg, &split, &RunOptions::default(), None).unwrap();
        let ck = r.state.to_checkpoint(&cfg);
        let back = TrainState::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
        assert_eq!(back.params, r.state.params);
        assert_eq!(back.momentum, r.state.momentum);
        assert_eq!(back.epoch, 3);
        assert_eq!(metrics_csv(&back.history), metrics_csv(&r.metrics));
    }
}
