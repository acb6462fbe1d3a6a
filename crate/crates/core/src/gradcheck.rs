//! Finite-difference gradient checks over every objective term, on random
//! small instances.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::RunConfig;
use crate::error::Result;
use crate::losses::{
    align_loss, behavioral_deltas, build_batch, classifier_losses, discovery_loss, pair_weights, sup_contrastive,
    unsup_contrastive, LossWeights,
};
use crate::model::{ova_bce_loss, ModelParams, NORM_EPS};
use crate::rng;
use crate::tensor::{finite_diff_gradcheck_many, Tape, Tensor, Var};
use crate::trainer::{prepare_step, step_objective, StepFlags};

/// Largest relative error a check may report and still pass.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckRow {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
}

impl GradcheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

fn gaussian(rows: usize, cols: usize, r: &mut rng::Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| r.sample(StandardNormal)).collect();
    Tensor::new(rows, cols, data).expect("sized")
}

fn uniform(n: usize, r: &mut rng::Rng) -> Vec<f64> {
    (0..n).map(|_| r.random::<f64>()).collect()
}

type Check = fn(&mut rng::Rng, &LossWeights, f64) -> Result<f64>;

fn check_unsup(r: &mut rng::Rng, w: &LossWeights, h: f64) -> Result<f64> {
    let n = r.random_range(2..=6);
    let d = r.random_range(2..=5);
    let xs = [gaussian(n, d, r), gaussian(n, d, r)];
    finite_diff_gradcheck_many(
        |t, v| {
            let a = t.l2_normalize_rows(v[0], NORM_EPS)?;
            let b = t.l2_normalize_rows(v[1], NORM_EPS)?;
            unsup_contrastive(t, a, b, w.tau_u)
        },
        &xs,
        h,
    )
}

fn check_sup(r: &mut rng::Rng, w: &LossWeights, h: f64) -> Result<f64> {
    let n = r.random_range(3..=7);
    let d = r.random_range(2..=5);
    let mut labels: Vec<usize> = (0..n).map(|_| r.random_range(0..3)).collect();
    labels[1] = labels[0];
    let xs = [gaussian(n, d, r), gaussian(n, d, r)];
    finite_diff_gradcheck_many(
        |t, v| {
            let a = t.l2_normalize_rows(v[0], NORM_EPS)?;
            let b = t.l2_normalize_rows(v[1], NORM_EPS)?;
            sup_contrastive(t, a, b, &labels, w.tau_s)
        },
        &xs,
        h,
    )
}

fn check_cls(r: &mut rng::Rng, w: &LossWeights, h: f64) -> Result<f64> {
    let n = r.random_range(2..=6);
    let k = r.random_range(3..=5);
    let num_known = 2;
    // cosine-range logits, as produced by prototype similarities
    let logits = Tensor::new(n, k, (0..n * k).map(|_| r.random_range(-1.0..1.0)).collect())?;
    let mut targets = Tensor::new(n, k, uniform(n * k, r))?;
    for i in 0..n {
        let s: f64 = targets.row(i).iter().sum();
        targets.row_mut(i).iter_mut().for_each(|v| *v /= s);
    }
    let labels: Vec<Option<usize>> = (0..n)
        .map(|_| r.random_bool(0.5).then(|| r.random_range(0..num_known)))
        .collect();
    finite_diff_gradcheck_many(
        |t, v| {
            let lp = t.log_softmax_rows(v[0], w.tau_s)?;
            classifier_losses(t, lp, &targets, &labels, num_known, w.lambda, w.epsilon)
        },
        &[logits],
        h,
    )
}

fn check_align(r: &mut rng::Rng, w: &LossWeights, h: f64) -> Result<f64> {
    let b = r.random_range(1..=3);
    let mu = r.random_range(1..=3);
    let batch = build_batch(b, &uniform(b * mu, r), mu, 1.0)?;
    let d = r.random_range(2..=4);
    let xs = [gaussian(batch.len(), d, r), gaussian(batch.len(), d, r)];
    let weights = batch.partner_weights();
    finite_diff_gradcheck_many(
        |t, v| {
            let (dl, du) = behavioral_deltas(t, v[0], v[1], &batch, w.alpha)?;
            Ok(align_loss(t, dl, du, &weights, batch.mu_id)?.expect("positive weights"))
        },
        &xs,
        h,
    )
}

fn check_new(r: &mut rng::Rng, w: &LossWeights, h: f64) -> Result<f64> {
    let n = r.random_range(2..=6);
    let d = r.random_range(2..=5);
    let c = r.random_range(2..=3);
    let weights = uniform(n, r);
    let xs = [gaussian(n, d, r), gaussian(c, d, r)];
    let pairs = pair_weights(&xs[0], &weights, w.tau_u)?;
    // signatures are cosines to reference points, as in training
    finite_diff_gradcheck_many(
        |t, v| {
            let r = crate::model::cosine_matrix(t, v[0], v[1])?;
            discovery_loss(t, r, &pairs)
        },
        &xs,
        h,
    )
}

fn check_ova(r: &mut rng::Rng, _w: &LossWeights, h: f64) -> Result<f64> {
    let n = r.random_range(2..=6);
    let p = r.random_range(2..=4);
    let c = r.random_range(2..=3);
    let z = gaussian(n, p, r);
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
    let xs = [gaussian(p, c, r), gaussian(1, c, r)];
    finite_diff_gradcheck_many(
        |t, v| {
            let zv = t.constant(z.clone());
            let zn = t.l2_normalize_rows(zv, NORM_EPS)?;
            let lin = t.matmul(zn, v[0])?;
            let logits = t.add_row(lin, v[1])?;
            ova_bce_loss(t, logits, &labels)
        },
        &xs,
        h,
    )
}

/// The full training objective without the one-vs-all term, with respect to
/// every model parameter, on a tiny model and batch.
fn check_total(r: &mut rng::Rng, w: &LossWeights, h: f64) -> Result<f64> {
    let mut cfg = RunConfig::default();
    cfg.loss = w.clone();
    cfg.model.hidden_dim = 5;
    cfg.model.feature_dim = 4;
    cfg.model.proj_hidden_dim = 5;
    cfg.model.proj_dim = 3;
    let (dim, k, c) = (4, 4, 2);
    let params = ModelParams::init(&cfg.model, dim, k, c, r.random());
    let b = 3;
    let mu = 2;
    let x_weak = gaussian(b * (1 + mu), dim, r);
    let x_strong = gaussian(b * (1 + mu), dim, r);
    let labels = vec![0, 1, 0];
    let flags = StepFlags {
        ova: false,
        align: true,
        new: true,
    };
    let inputs = prepare_step(&params, &cfg, x_weak, x_strong, labels, mu, 1.0, flags)?;
    let xs: Vec<Tensor> = params.trainable().into_iter().cloned().collect();
    finite_diff_gradcheck_many(
        |t: &mut Tape, v: &[Var]| {
            let vars = params.vars_from(t, v)?;
            Ok(step_objective(t, &vars, &inputs, &cfg)?.objective)
        },
        &xs,
        h,
    )
}

const CHECKS: [(&str, Check); 7] = [
    ("unsup_contrastive", check_unsup),
    ("sup_contrastive", check_sup),
    ("classifier_losses", check_cls),
    ("align_loss", check_align),
    ("discovery_loss", check_new),
    ("ova_bce", check_ova),
    ("total_loss", check_total),
];

/// Runs every check on `instances` random instances with step `h`.
pub fn run_suite(weights: &LossWeights, instances: usize, h: f64, seed: u64) -> Result<Vec<GradcheckRow>> {
    CHECKS
        .iter()
        .map(|&(name, check)| {
            let mut worst = 0.0f64;
            for i in 0..instances {
                let mut r = rng::stream(seed, name, i as u64);
                worst = worst.max(check(&mut r, weights, h)?);
            }
            Ok(GradcheckRow {
                name,
                instances,
                max_rel_err: worst,
            })
        })
        .collect()
}

pub fn format_table(rows: &[GradcheckRow]) -> String {
    let mut out = format!("{:<18}  {:>9}  {:>12}  result\n", "loss", "instances", "max rel err");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<18}  {:>9}  {:>12.3e}  {}",
            r.name,
            r.instances,
            r.max_rel_err,
            if r.passed() { "pass" } else { "FAIL" }
        );
    }
    out
}
