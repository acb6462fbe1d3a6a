//! Trainable state and the score functions computed from it.
//!
//! - encoder `f`: input → feature (2-layer tanh MLP)
//! - projector `g`: feature → projection (2-layer tanh MLP)
//! - prototypes `T`: `K × d`, compared to features by cosine similarity;
//!   the first `C_L` rows belong to the known classes
//! - one-vs-all heads: one logistic unit per known class on the
//!   L2-normalized projection
//!
//! Forward functions take a [`Tape`] and the [`ModelVars`] obtained from
//! [`ModelParams::bind`], so the same code serves training, evaluation and
//! gradient checking.

mod checkpoint;

pub use checkpoint::Checkpoint;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

/// Floor applied to row norms before cosine normalization.
pub const NORM_EPS: f64 = 1e-12;

/// Which vectors act as known-class reference points for relational
/// signatures.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnownPrototypes {
    /// The first `C_L` classifier prototypes.
    #[default]
    Classifier,
    /// Running per-class means of labeled features.
    FeatureMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub proj_hidden_dim: usize,
    pub proj_dim: usize,
    pub known_prototypes: KnownPrototypes,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dim: 64,
            feature_dim: 32,
            proj_hidden_dim: 64,
            proj_dim: 32,
            known_prototypes: KnownPrototypes::Classifier,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.hidden_dim, self.feature_dim, self.proj_hidden_dim, self.proj_dim].contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `in × out`
    pub weight: Tensor,
    /// `1 × out`
    pub bias: Tensor,
}

impl Linear {
    fn random(fan_in: usize, fan_out: usize, rng: &mut rng::Rng) -> Self {
        let std = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Linear {
            weight: Tensor::new(fan_in, fan_out, data).expect("sized"),
            bias: Tensor::zeros(1, fan_out),
        }
    }
}

/// Stack of affine layers with `tanh` between them (none after the last).
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn random(dims: &[usize], rng: &mut rng::Rng) -> Self {
        Mlp {
            layers: dims.windows(2).map(|w| Linear::random(w[0], w[1], rng)).collect(),
        }
    }

    /// Single identity layer.
    pub fn identity(dim: usize) -> Self {
        Mlp {
            layers: vec![Linear {
                weight: Tensor::eye(dim),
                bias: Tensor::zeros(1, dim),
            }],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.rows())
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.cols())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub encoder: Mlp,
    pub projector: Mlp,
    /// `K × d`
    pub prototypes: Tensor,
    /// `proj_dim × C_L`, one column per known class.
    pub ova_weight: Tensor,
    /// `1 × C_L`
    pub ova_bias: Tensor,
    /// `C_L × d` running means of labeled features; not trained by SGD.
    pub feature_means: Tensor,
    pub known_prototypes: KnownPrototypes,
}

struct MlpVars(Vec<(Var, Var)>);

/// Parameters placed on a tape.
pub struct ModelVars {
    encoder: MlpVars,
    projector: MlpVars,
    pub prototypes: Var,
    pub ova_weight: Var,
    pub ova_bias: Var,
    /// Known-class reference vectors used by relational signatures.
    pub known_refs: Var,
    trainable: Vec<Var>,
}

impl ModelVars {
    /// Trainable vars in [`ModelParams::trainable_mut`] order.
    pub fn trainable(&self) -> &[Var] {
        &self.trainable
    }
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, input_dim: usize, num_classes: usize, num_known: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "model.init", 0);
        let encoder = Mlp::random(&[input_dim, cfg.hidden_dim, cfg.feature_dim], &mut r);
        let projector = Mlp::random(&[cfg.feature_dim, cfg.proj_hidden_dim, cfg.proj_dim], &mut r);
        let mut prototypes = Tensor::zeros(num_classes, cfg.feature_dim);
        for k in 0..num_classes {
            let row = prototypes.row_mut(k);
            for v in row.iter_mut() {
                *v = r.sample(StandardNormal);
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let ova = (0..cfg.proj_dim * num_known)
            .map(|_| 0.02 * r.sample::<f64, _>(StandardNormal))
            .collect();
        ModelParams {
            encoder,
            projector,
            feature_means: prototypes.select_rows(&(0..num_known).collect::<Vec<_>>()),
            prototypes,
            ova_weight: Tensor::new(cfg.proj_dim, num_known, ova).expect("sized"),
            ova_bias: Tensor::zeros(1, num_known),
            known_prototypes: cfg.known_prototypes,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn num_known(&self) -> usize {
        self.ova_weight.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.prototypes.cols()
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// Every tensor under a stable name; trainable tensors first, in
    /// [`ModelParams::trainable_mut`] order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (prefix, mlp) in [("encoder", &self.encoder), ("projector", &self.projector)] {
            for (i, l) in mlp.layers.iter().enumerate() {
                out.push((format!("{prefix}.{i}.weight"), &l.weight));
                out.push((format!("{prefix}.{i}.bias"), &l.bias));
            }
        }
        out.push(("prototypes".into(), &self.prototypes));
        out.push(("ova.weight".into(), &self.ova_weight));
        out.push(("ova.bias".into(), &self.ova_bias));
        out.push(("feature_means".into(), &self.feature_means));
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for mlp in [&mut self.encoder, &mut self.projector] {
            for l in &mut mlp.layers {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        out.push(&mut self.prototypes);
        out.push(&mut self.ova_weight);
        out.push(&mut self.ova_bias);
        out
    }

    pub fn trainable(&self) -> Vec<&Tensor> {
        let n = 2 * (self.encoder.layers.len() + self.projector.layers.len()) + 3;
        self.named_tensors().into_iter().take(n).map(|(_, t)| t).collect()
    }

    /// Rebuilds parameters from [`ModelParams::named_tensors`] output.
    pub fn from_named(tensors: &[(String, Tensor)], known_prototypes: KnownPrototypes) -> Result<Self> {
        let get = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::parse("checkpoint", format!("missing tensor `{name}`")))
        };
        let mlp = |prefix: &str| -> Result<Mlp> {
            let mut layers = Vec::new();
            while tensors.iter().any(|(n, _)| n == &format!("{prefix}.{}.weight", layers.len())) {
                let i = layers.len();
                layers.push(Linear {
                    weight: get(&format!("{prefix}.{i}.weight"))?,
                    bias: get(&format!("{prefix}.{i}.bias"))?,
                });
            }
            if layers.is_empty() {
                return Err(Error::parse("checkpoint", format!("no `{prefix}` layers")));
            }
            Ok(Mlp { layers })
        };
        let params = ModelParams {
            encoder: mlp("encoder")?,
            projector: mlp("projector")?,
            prototypes: get("prototypes")?,
            ova_weight: get("ova.weight")?,
            ova_bias: get("ova.bias")?,
            feature_means: get("feature_means")?,
            known_prototypes,
        };
        params.check_shapes()?;
        Ok(params)
    }

    pub fn check_shapes(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::dim("ModelParams", what.to_string()));
        for mlp in [&self.encoder, &self.projector] {
            for w in mlp.layers.windows(2) {
                if w[0].weight.cols() != w[1].weight.rows() {
                    return bad("layer widths do not chain");
                }
            }
            if mlp.layers.iter().any(|l| l.bias.shape() != [1, l.weight.cols()]) {
                return bad("bias width");
            }
        }
        if self.encoder.out_dim() != self.projector.in_dim() {
            return bad("encoder output vs projector input");
        }
        if self.prototypes.cols() != self.encoder.out_dim() {
            return bad("prototype width vs feature dim");
        }
        if self.ova_weight.rows() != self.projector.out_dim()
            || self.ova_bias.shape() != [1, self.ova_weight.cols()]
        {
            return bad("ova head shapes");
        }
        if self.num_known() == 0 || self.num_known() >= self.num_classes() + 1 {
            return bad("known class count");
        }
        if self.feature_means.shape() != [self.num_known(), self.feature_dim()] {
            return bad("feature_means shape");
        }
        Ok(())
    }

    /// Places every tensor on `tape`, as params when `trainable` else as
    /// constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<ModelVars> {
        let vars: Vec<Var> = self
            .trainable()
            .into_iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        self.vars_from(tape, &vars)
    }

    /// Assembles [`ModelVars`] from vars already on the tape, given in
    /// [`ModelParams::trainable`] order. Shapes must match.
    pub fn vars_from(&self, tape: &mut Tape, trainable: &[Var]) -> Result<ModelVars> {
        let expected = self.trainable();
        if trainable.len() != expected.len() {
            return Err(Error::dim(
                "ModelParams::vars_from",
                format!("{} vars for {} tensors", trainable.len(), expected.len()),
            ));
        }
        for (&v, t) in trainable.iter().zip(&expected) {
            if tape.value(v).shape() != t.shape() {
                return Err(Error::dim("ModelParams::vars_from", "tensor shape differs"));
            }
        }
        let n_enc = 2 * self.encoder.layers.len();
        let n_proj = 2 * self.projector.layers.len();
        let pairs = |s: &[Var]| MlpVars(s.chunks(2).map(|c| (c[0], c[1])).collect());
        let encoder = pairs(&trainable[..n_enc]);
        let projector = pairs(&trainable[n_enc..n_enc + n_proj]);
        let [prototypes, ova_weight, ova_bias] = [
            trainable[n_enc + n_proj],
            trainable[n_enc + n_proj + 1],
            trainable[n_enc + n_proj + 2],
        ];
        let known_refs = match self.known_prototypes {
            KnownPrototypes::Classifier => {
                let idx: Vec<usize> = (0..self.num_known()).collect();
                tape.select_rows(prototypes, &idx)?
            }
            KnownPrototypes::FeatureMean => tape.constant(self.feature_means.clone()),
        };
        Ok(ModelVars {
            encoder,
            projector,
            prototypes,
            ova_weight,
            ova_bias,
            known_refs,
            trainable: trainable.to_vec(),
        })
    }
}

fn mlp_forward(tape: &mut Tape, mlp: &MlpVars, x: Var) -> Result<Var> {
    let mut h = x;
    for (i, &(w, b)) in mlp.0.iter().enumerate() {
        if i > 0 {
            h = tape.tanh(h)?;
        }
        let lin = tape.matmul(h, w)?;
        h = tape.add_row(lin, b)?;
    }
    Ok(h)
}

/// Features `h = f(x)`, one row per input row.
pub fn encode(tape: &mut Tape, vars: &ModelVars, x: Var) -> Result<Var> {
    mlp_forward(tape, &vars.encoder, x)
}

/// Projections `z = g(h)`.
pub fn project(tape: &mut Tape, vars: &ModelVars, h: Var) -> Result<Var> {
    mlp_forward(tape, &vars.projector, h)
}

/// Cosine similarity of every row of `a` with every row of `b`.
pub fn cosine_matrix(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let an = tape.l2_normalize_rows(a, NORM_EPS)?;
    let bn = tape.l2_normalize_rows(b, NORM_EPS)?;
    let bt = tape.transpose(bn)?;
    tape.matmul(an, bt)
}

/// `n × K` cosine similarities between features and all prototypes.
pub fn prototype_cosines(tape: &mut Tape, vars: &ModelVars, h: Var) -> Result<Var> {
    cosine_matrix(tape, h, vars.prototypes)
}

/// Soft labels `softmax_k(cos(h, t_k) / τ)`.
pub fn soft_label(tape: &mut Tape, vars: &ModelVars, h: Var, tau: f64) -> Result<Var> {
    let cos = prototype_cosines(tape, vars, h)?;
    tape.softmax_rows(cos, tau)
}

/// Log of [`soft_label`], computed directly for stability.
pub fn log_soft_label(tape: &mut Tape, vars: &ModelVars, h: Var, tau: f64) -> Result<Var> {
    let cos = prototype_cosines(tape, vars, h)?;
    tape.log_softmax_rows(cos, tau)
}

/// `n × C_L` one-vs-all logits on the projection `z`.
pub fn ova_logits(tape: &mut Tape, vars: &ModelVars, z: Var) -> Result<Var> {
    let lin = tape.matmul(z, vars.ova_weight)?;
    tape.add_row(lin, vars.ova_bias)
}

/// In-distribution score `s_ID = max_c σ(h_c(z))`, as an `n × 1` column.
pub fn id_score(tape: &mut Tape, vars: &ModelVars, z: Var) -> Result<Var> {
    let logits = ova_logits(tape, vars, z)?;
    let probs = tape.sigmoid(logits)?;
    tape.max_cols(probs)
}

/// `n × C_L` relational signatures `r(x)_c = cos(f(x), p_c)`.
pub fn relational_signature(tape: &mut Tape, vars: &ModelVars, h: Var) -> Result<Var> {
    cosine_matrix(tape, h, vars.known_refs)
}

/// Mean binary cross-entropy of the one-vs-all heads over labeled rows:
/// target 1 for the row's own class, 0 for every other known class.
pub fn ova_bce_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let [n, c] = tape.value(logits).shape();
    if n == 0 {
        return Err(Error::Contract("ova_bce_loss on an empty batch".into()));
    }
    if labels.len() != n {
        return Err(Error::dim("ova_bce_loss", format!("{} labels for {n} rows", labels.len())));
    }
    let mut target = Tensor::zeros(n, c);
    for (r, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Contract(format!("label {y} is not a known class (C_L = {c})")));
        }
        target.set(r, y, 1.0);
    }
    // BCE with logits: softplus(l) − y·l
    let t = tape.constant(target);
    let sp = tape.softplus(logits)?;
    let yl = tape.mul(t, logits)?;
    let per = tape.sub(sp, yl)?;
    tape.mean(per)
}

/// ID/OOD weights for one sample. `w_old + w_new = 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OvaWeights {
    pub w_old: f64,
    pub w_new: f64,
}

impl OvaWeights {
    pub fn from_id_score(s_id: f64) -> Self {
        OvaWeights {
            w_old: s_id,
            w_new: 1.0 - s_id,
        }
    }
}

/// Per-sample scores evaluated without gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Scores {
    pub soft_label: Vec<f64>,
    pub w_old: f64,
    pub w_new: f64,
    pub signature: Vec<f64>,
}

/// One-vs-all weights for every row of `x`.
pub fn ova_weights(params: &ModelParams, x: &Tensor) -> Result<Vec<OvaWeights>> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false)?;
    let xv = tape.constant(x.clone());
    let h = encode(&mut tape, &vars, xv)?;
    let z = project(&mut tape, &vars, h)?;
    let s = id_score(&mut tape, &vars, z)?;
    Ok(tape.value(s).data().iter().map(|&v| OvaWeights::from_id_score(v)).collect())
}

/// Soft label, OVA weights and relational signature for every row of `x`.
pub fn scores(params: &ModelParams, x: &Tensor, tau_s: f64) -> Result<Vec<Scores>> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false)?;
    let xv = tape.constant(x.clone());
    let h = encode(&mut tape, &vars, xv)?;
    let z = project(&mut tape, &vars, h)?;
    let p = soft_label(&mut tape, &vars, h, tau_s)?;
    let s = id_score(&mut tape, &vars, z)?;
    let r = relational_signature(&mut tape, &vars, h)?;
    let (p, s, r) = (tape.value(p), tape.value(s), tape.value(r));
    Ok((0..x.rows())
        .map(|i| {
            let w = OvaWeights::from_id_score(s.data()[i]);
            Scores {
                soft_label: p.row(i).to_vec(),
                w_old: w.w_old,
                w_new: w.w_new,
                signature: r.row(i).to_vec(),
            }
        })
        .collect())
}

/// Arg-max cluster of the soft label for every row of `x`.
pub fn predict_clusters(params: &ModelParams, x: &Tensor) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false)?;
    let xv = tape.constant(x.clone());
    let h = encode(&mut tape, &vars, xv)?;
    let cos = prototype_cosines(&mut tape, &vars, h)?;
    let cos = tape.value(cos);
    Ok((0..cos.rows())
        .map(|r| {
            let row = cos.row(r);
            (0..row.len()).fold(0, |best, c| if row[c] > row[best] { c } else { best })
        })
        .collect())
}
