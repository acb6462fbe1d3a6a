//! Objective terms, batch construction and embedding fusion.
//!
//! All functions record onto a caller-owned [`Tape`]. Quantities that act
//! as targets or weights (soft-label targets, one-vs-all weights) are
//! passed in as plain tensors or slices, so no gradient can reach them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Added to masked-out logits; `exp` of it underflows to exactly zero.
const MASK: f64 = -1e4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Balance between unsupervised and supervised terms.
    pub lambda: f64,
    /// Weight of the mean-prediction entropy bonus.
    pub epsilon: f64,
    /// Alignment loss weight.
    pub lambda1: f64,
    /// Discovery loss weight.
    pub lambda2: f64,
    /// Embedding fusion weight.
    pub alpha: f64,
    /// Supervised contrastive and classifier temperature.
    pub tau_s: f64,
    /// Unsupervised contrastive and pair-similarity temperature.
    pub tau_u: f64,
    /// Fixed known-class ratio for the unlabeled pool. `None` re-estimates
    /// it every epoch from the one-vs-all heads.
    pub rho_id: Option<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 0.35,
            epsilon: 1.0,
            lambda1: 0.5,
            lambda2: 0.3,
            alpha: 0.3,
            tau_s: 0.1,
            tau_u: 0.07,
            rho_id: None,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("epsilon", self.epsilon),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        for (name, v) in [("lambda", self.lambda), ("alpha", self.alpha)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        for (name, v) in [("tau_s", self.tau_s), ("tau_u", self.tau_u)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if let Some(r) = self.rho_id {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("rho_id must be in [0, 1], got {r}")));
            }
        }
        Ok(())
    }
}

fn contrastive_inputs(tape: &Tape, op: &'static str, z_hat: Var, z_tilde: Var) -> Result<usize> {
    let (a, b) = (tape.value(z_hat).shape(), tape.value(z_tilde).shape());
    if a != b {
        return Err(Error::dim(op, format!("{a:?} vs {b:?}")));
    }
    if a[0] < 2 {
        return Err(Error::Contract(format!("{op} needs at least 2 rows, got {}", a[0])));
    }
    Ok(a[0])
}

/// Self-supervised contrastive loss between two views. Rows must already be
/// L2-normalized. For anchor `i` the candidates are `ẑ_j · z̃_i` over every
/// `j`, including `j = i`.
pub fn unsup_contrastive(tape: &mut Tape, z_hat: Var, z_tilde: Var, tau: f64) -> Result<Var> {
    let n = contrastive_inputs(tape, "unsup_contrastive", z_hat, z_tilde)?;
    // m[i][j] = z̃_i · ẑ_j; softmax over j
    let zh_t = tape.transpose(z_hat)?;
    let m = tape.matmul(z_tilde, zh_t)?;
    let logp = tape.log_softmax_rows(m, tau)?;
    let diag = tape.gather_cols(logp, &(0..n).collect::<Vec<_>>())?;
    let mean = tape.mean(diag)?;
    tape.scale(mean, -1.0)
}

/// Supervised contrastive loss. Positives of anchor `i` are the other rows
/// with the same label; the denominator runs over every row of the `z̃`
/// view except `i`. Anchors without positives are skipped.
pub fn sup_contrastive(tape: &mut Tape, z_hat: Var, z_tilde: Var, labels: &[usize], tau: f64) -> Result<Var> {
    let n = contrastive_inputs(tape, "sup_contrastive", z_hat, z_tilde)?;
    if labels.len() != n {
        return Err(Error::dim("sup_contrastive", format!("{} labels for {n} rows", labels.len())));
    }
    let positives: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect())
        .collect();
    let anchors = positives.iter().filter(|p| !p.is_empty()).count();
    if anchors == 0 {
        return Err(Error::Contract("sup_contrastive: no anchor has a positive".into()));
    }
    let mut weight = Tensor::zeros(n, n);
    let mut mask = Tensor::zeros(n, n);
    for (i, pos) in positives.iter().enumerate() {
        mask.set(i, i, MASK);
        for &p in pos {
            weight.set(i, p, 1.0 / (anchors as f64 * pos.len() as f64));
        }
    }
    let zt_t = tape.transpose(z_tilde)?;
    let s = tape.matmul(z_hat, zt_t)?;
    let s = tape.scale(s, 1.0 / tau)?;
    let mask = tape.constant(mask);
    let s = tape.add(s, mask)?;
    let logp = tape.log_softmax_rows(s, 1.0)?;
    let weight = tape.constant(weight);
    let picked = tape.mul(logp, weight)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0)
}

/// Entropy `−Σ p̄ log p̄` of the batch-mean prediction over both views.
/// `log_p_hat` carries gradient; `p_tilde` is a constant.
pub fn mean_entropy(tape: &mut Tape, log_p_hat: Var, p_tilde: &Tensor) -> Result<Var> {
    let [n, k] = tape.value(log_p_hat).shape();
    if p_tilde.shape() != [n, k] {
        return Err(Error::dim("mean_entropy", format!("{:?} vs {:?}", [n, k], p_tilde.shape())));
    }
    let p_hat = tape.exp(log_p_hat)?;
    let col_hat = tape.sum_cols(p_hat)?;
    let mut col_tilde = Tensor::zeros(1, k);
    for r in 0..n {
        for (c, v) in col_tilde.data_mut().iter_mut().zip(p_tilde.row(r)) {
            *c += v;
        }
    }
    let col_tilde = tape.constant(col_tilde);
    let both = tape.add(col_hat, col_tilde)?;
    let p_bar = tape.scale(both, 1.0 / (2 * n) as f64)?;
    // p̄ > 0 whenever rows come from a softmax; the floor only guards ln.
    let floored = tape.add_scalar(p_bar, 1e-300)?;
    let log_bar = tape.ln(floored)?;
    let plogp = tape.mul(p_bar, log_bar)?;
    let s = tape.sum(plogp)?;
    tape.scale(s, -1.0)
}

/// Self-distillation classifier loss on log-probabilities `log_p_hat`
/// (`n × K`) against detached targets `p_tilde`. Rows with `Some(label)`
/// also contribute a supervised cross-entropy term.
pub fn classifier_losses(
    tape: &mut Tape,
    log_p_hat: Var,
    p_tilde: &Tensor,
    labels: &[Option<usize>],
    num_known: usize,
    lambda: f64,
    epsilon: f64,
) -> Result<Var> {
    let [n, k] = tape.value(log_p_hat).shape();
    if p_tilde.shape() != [n, k] {
        return Err(Error::dim("classifier_losses", format!("{:?} vs {:?}", [n, k], p_tilde.shape())));
    }
    if labels.len() != n {
        return Err(Error::dim("classifier_losses", format!("{} labels for {n} rows", labels.len())));
    }
    if n == 0 {
        return Err(Error::Contract("classifier_losses on an empty batch".into()));
    }

    let target = tape.constant(p_tilde.clone());
    let prod = tape.mul(target, log_p_hat)?;
    let s = tape.sum(prod)?;
    let mut loss = tape.scale(s, -(1.0 - lambda) / n as f64)?;

    let labeled: Vec<(usize, usize)> = labels
        .iter()
        .enumerate()
        .filter_map(|(r, y)| y.map(|y| (r, y)))
        .collect();
    if let Some(&(_, y)) = labeled.iter().find(|(_, y)| *y >= num_known) {
        return Err(Error::Contract(format!("label {y} is not a known class (C_L = {num_known})")));
    }
    if !labeled.is_empty() && lambda != 0.0 {
        let mut onehot = Tensor::zeros(n, k);
        for &(r, y) in &labeled {
            onehot.set(r, y, 1.0);
        }
        let onehot = tape.constant(onehot);
        let prod = tape.mul(onehot, log_p_hat)?;
        let s = tape.sum(prod)?;
        let sup = tape.scale(s, -lambda / labeled.len() as f64)?;
        loss = tape.add(loss, sup)?;
    }

    if epsilon != 0.0 {
        let h = mean_entropy(tape, log_p_hat, p_tilde)?;
        let h = tape.scale(h, -epsilon)?;
        loss = tape.add(loss, h)?;
    }
    Ok(loss)
}

/// Position of a fused-batch row in the step's sample lists.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchRow {
    /// Index into the step's labeled samples.
    Labeled(usize),
    /// Index into the step's unlabeled candidates.
    Unlabeled(usize),
}

/// Interleaved batch `[l₁, u₁₁..u₁μ, l₂, ...]` pairing each labeled anchor
/// with its most in-distribution unlabeled candidates.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedBatch {
    pub num_labeled: usize,
    pub mu_id: usize,
    pub order: Vec<BatchRow>,
    /// One weight per row of `order`; 1.0 for labeled rows.
    pub w_old: Vec<f64>,
}

impl FusedBatch {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Row positions of the labeled anchors, `i(1 + μ_ID)`.
    pub fn labeled_rows(&self) -> Vec<usize> {
        (0..self.num_labeled).map(|i| i * (1 + self.mu_id)).collect()
    }

    /// Row positions of unlabeled partners, grouped by anchor.
    pub fn unlabeled_rows(&self) -> Vec<usize> {
        (0..self.num_labeled)
            .flat_map(|i| (1..=self.mu_id).map(move |j| i * (1 + self.mu_id) + j))
            .collect()
    }

    /// `w_old` of the unlabeled partners, in [`FusedBatch::unlabeled_rows`]
    /// order.
    pub fn partner_weights(&self) -> Vec<f64> {
        self.unlabeled_rows().iter().map(|&r| self.w_old[r]).collect()
    }
}

/// Number of partners kept per anchor, `floor(μ · ρ_ID)`.
pub fn mu_id(mu: usize, rho_id: f64) -> usize {
    ((mu as f64 * rho_id).floor() as usize).min(mu)
}

/// Builds the fused batch for `num_labeled` anchors. `candidate_w_old`
/// holds the one-vs-all weight of the `μ` unlabeled candidates sampled for
/// each anchor, grouped by anchor. Ties keep the earlier candidate.
pub fn build_batch(num_labeled: usize, candidate_w_old: &[f64], mu: usize, rho_id: f64) -> Result<FusedBatch> {
    if mu == 0 {
        return Err(Error::Param("build_batch: mu must be >= 1".into()));
    }
    if candidate_w_old.len() != num_labeled * mu {
        return Err(Error::dim(
            "build_batch",
            format!("{} candidates for {num_labeled} anchors with mu {mu}", candidate_w_old.len()),
        ));
    }
    if !(0.0..=1.0).contains(&rho_id) {
        return Err(Error::Param(format!("rho_id must be in [0, 1], got {rho_id}")));
    }
    let keep = mu_id(mu, rho_id);
    let mut order = Vec::with_capacity(num_labeled * (1 + keep));
    let mut w_old = Vec::with_capacity(order.capacity());
    for i in 0..num_labeled {
        order.push(BatchRow::Labeled(i));
        w_old.push(1.0);
        let mut group: Vec<usize> = (i * mu..(i + 1) * mu).collect();
        group.sort_by(|&a, &b| candidate_w_old[b].total_cmp(&candidate_w_old[a]).then(a.cmp(&b)));
        for &c in &group[..keep] {
            order.push(BatchRow::Unlabeled(c));
            w_old.push(candidate_w_old[c]);
        }
    }
    Ok(FusedBatch {
        num_labeled,
        mu_id: keep,
        order,
        w_old,
    })
}

/// `A[i][(i−1) mod Q] = α·w_i`, `A[i][i] = −α·w_i`. For `Q = 1` both
/// entries coincide and cancel.
pub fn fusion_matrix(w_old: &[f64], alpha: f64) -> Tensor {
    let q = w_old.len();
    let mut a = Tensor::zeros(q, q);
    for (i, &w) in w_old.iter().enumerate() {
        let prev = (i + q - 1) % q;
        a.set(i, prev, a.get(i, prev) + alpha * w);
        a.set(i, i, a.get(i, i) - alpha * w);
    }
    a
}

/// `Z' = (I + A) Z`. An all-zero `A` returns `z` itself.
pub fn apply_fusion(tape: &mut Tape, z: Var, a: &Tensor) -> Result<Var> {
    let q = tape.value(z).rows();
    if a.shape() != [q, q] {
        return Err(Error::dim("apply_fusion", format!("A is {:?}, Z has {q} rows", a.shape())));
    }
    if a.data().iter().all(|&v| v == 0.0) {
        return Ok(z);
    }
    let mut m = a.clone();
    for i in 0..q {
        m.set(i, i, 1.0 + m.get(i, i));
    }
    let m = tape.constant(m);
    tape.matmul(m, z)
}

/// Behavioral deltas `g(f(weak)) − g(f(strong))` for a fused batch, given
/// the weak- and strong-view projections of its rows in batch order.
/// Returns `(labeled, unlabeled)`: raw deltas for the anchors and deltas of
/// the fused projections for the partners, grouped by anchor.
pub fn behavioral_deltas(
    tape: &mut Tape,
    z_weak: Var,
    z_strong: Var,
    batch: &FusedBatch,
    alpha: f64,
) -> Result<(Var, Var)> {
    let q = batch.len();
    for v in [z_weak, z_strong] {
        if tape.value(v).rows() != q {
            return Err(Error::dim(
                "behavioral_deltas",
                format!("{} rows for a batch of {q}", tape.value(v).rows()),
            ));
        }
    }
    let raw = tape.sub(z_weak, z_strong)?;
    let a = fusion_matrix(&batch.w_old, alpha);
    let fw = apply_fusion(tape, z_weak, &a)?;
    let fs = apply_fusion(tape, z_strong, &a)?;
    let fused = tape.sub(fw, fs)?;
    let labeled = tape.select_rows(raw, &batch.labeled_rows())?;
    let unlabeled = tape.select_rows(fused, &batch.unlabeled_rows())?;
    Ok((labeled, unlabeled))
}

/// Mean over anchors of `‖Δ_l − Σ_j w_j Δ_u,j / Σ_j w_j‖²`, with the
/// unlabeled deltas grouped `mu_id` per anchor. Anchors whose weights sum
/// to zero are skipped; `None` when no anchor remains.
pub fn align_loss(
    tape: &mut Tape,
    deltas_labeled: Var,
    deltas_unlabeled: Var,
    w_old: &[f64],
    mu_id: usize,
) -> Result<Option<Var>> {
    let b = tape.value(deltas_labeled).rows();
    let nu = tape.value(deltas_unlabeled).rows();
    if nu != b * mu_id || w_old.len() != nu {
        return Err(Error::dim(
            "align_loss",
            format!("{b} anchors, {nu} partner deltas, {} weights, mu_id {mu_id}", w_old.len()),
        ));
    }
    if mu_id == 0 {
        return Ok(None);
    }
    let mut avg = Tensor::zeros(b, nu);
    let mut valid = Vec::new();
    for i in 0..b {
        let group = &w_old[i * mu_id..(i + 1) * mu_id];
        let total: f64 = group.iter().sum();
        if total > 0.0 {
            valid.push(i);
            for (j, &w) in group.iter().enumerate() {
                avg.set(i, i * mu_id + j, w / total);
            }
        }
    }
    if valid.is_empty() {
        return Ok(None);
    }
    let avg = tape.constant(avg);
    let mean = tape.matmul(avg, deltas_unlabeled)?;
    let diff = tape.sub(deltas_labeled, mean)?;
    let diff = tape.select_rows(diff, &valid)?;
    let sq = tape.square(diff)?;
    let s = tape.sum(sq)?;
    Ok(Some(tape.scale(s, 1.0 / valid.len() as f64)?))
}

/// `exp(cos(a, b) / τ)`.
pub fn pairwise_similarity(a: &[f64], b: &[f64], tau: f64) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(crate::model::NORM_EPS);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(crate::model::NORM_EPS);
    (dot / (na * nb) / tau).exp()
}

/// Constant `n × n` pair weights `w_i w_j s_ij` with a zero diagonal, where
/// `s_ij` is the [`pairwise_similarity`] of feature rows `h`.
pub fn pair_weights(h: &Tensor, w_new: &[f64], tau: f64) -> Result<Tensor> {
    let n = h.rows();
    if w_new.len() != n {
        return Err(Error::dim("pair_weights", format!("{n} features, {} weights", w_new.len())));
    }
    let mut p = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p.set(i, j, w_new[i] * w_new[j] * pairwise_similarity(h.row(i), h.row(j), tau));
            }
        }
    }
    Ok(p)
}

/// `Σ_{i≠j} P_ij ‖r_i − r_j‖²` over ordered pairs, where `r` holds the
/// relational signatures and `P` comes from [`pair_weights`].
pub fn discovery_loss(tape: &mut Tape, r: Var, pairs: &Tensor) -> Result<Var> {
    let n = tape.value(r).rows();
    if pairs.shape() != [n, n] {
        return Err(Error::dim(
            "discovery_loss",
            format!("{n} signatures, pair weights {:?}", pairs.shape()),
        ));
    }
    if n < 2 {
        return Err(Error::Contract(format!("discovery_loss needs at least 2 rows, got {n}")));
    }
    let left: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, n)).collect();
    let right: Vec<usize> = (0..n).flat_map(|_| 0..n).collect();
    let ri = tape.select_rows(r, &left)?;
    let rj = tape.select_rows(r, &right)?;
    let d = tape.sub(ri, rj)?;
    let d = tape.square(d)?;
    let d = tape.sum_rows(d)?;
    let w = tape.constant(Tensor::new(n * n, 1, pairs.data().to_vec())?);
    let terms = tape.mul(w, d)?;
    tape.sum(terms)
}

/// Per-step loss terms. Optional terms are absent when they were not
/// computed (stage gate, empty pairing, disabled method).
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub rep_u: Var,
    pub rep_s: Var,
    pub cls: Var,
    pub align: Option<Var>,
    pub new: Option<Var>,
}

/// `(1−λ)·rep_u + λ·rep_s + cls + λ₁·align + λ₂·new`. Terms with a zero
/// weight are left out of the graph entirely, so `λ₁ = λ₂ = 0` reproduces
/// the baseline sum bit for bit.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms, w: &LossWeights) -> Result<Var> {
    let u = tape.scale(terms.rep_u, 1.0 - w.lambda)?;
    let s = tape.scale(terms.rep_s, w.lambda)?;
    let rep = tape.add(u, s)?;
    let mut total = tape.add(rep, terms.cls)?;
    for (term, weight) in [(terms.align, w.lambda1), (terms.new, w.lambda2)] {
        if let (Some(t), true) = (term, weight != 0.0) {
            let t = tape.scale(t, weight)?;
            total = tape.add(total, t)?;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_gradcheck, finite_diff_gradcheck_many};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(rows, cols, (0..rows * cols).map(|_| r.random::<f64>() * 2.0 - 1.0).collect()).unwrap()
    }

    fn normalized(t: &Tensor) -> Tensor {
        let mut t = t.clone();
        for r in 0..t.rows() {
            let row = t.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= n);
        }
        t
    }

    fn eval(f: impl FnOnce(&mut Tape) -> Result<Var>) -> f64 {
        let mut tape = Tape::new();
        let v = f(&mut tape).unwrap();
        tape.value(v).item()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    // Direct scalar evaluation of the supervised contrastive formula.
    fn sup_oracle(zh: &Tensor, zt: &Tensor, labels: &[usize], tau: f64) -> f64 {
        let n = zh.rows();
        let mut total = 0.0;
        let mut anchors = 0;
        for i in 0..n {
            let pos: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
            if pos.is_empty() {
                continue;
            }
            anchors += 1;
            let denom: f64 = (0..n)
                .filter(|&k| k != i)
                .map(|k| (dot(zh.row(i), zt.row(k)) / tau).exp())
                .sum();
            let mut s = 0.0;
            for &p in &pos {
                s += -((dot(zh.row(i), zt.row(p)) / tau).exp() / denom).ln();
            }
            total += s / pos.len() as f64;
        }
        total / anchors as f64
    }

    fn unsup_oracle(zh: &Tensor, zt: &Tensor, tau: f64) -> f64 {
        let n = zh.rows();
        let mut total = 0.0;
        for i in 0..n {
            let denom: f64 = (0..n).map(|j| (dot(zh.row(j), zt.row(i)) / tau).exp()).sum();
            total += -((dot(zh.row(i), zt.row(i)) / tau).exp() / denom).ln();
        }
        total / n as f64
    }

    fn discovery_oracle(h: &Tensor, r: &Tensor, w: &[f64], tau: f64) -> f64 {
        let n = h.rows();
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let s = pairwise_similarity(h.row(i), h.row(j), tau);
                let d: f64 = r.row(i).iter().zip(r.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
                total += w[i] * w[j] * s * d;
            }
        }
        total
    }

    #[test]
    fn unsup_orthonormal_pairs() {
        let z = Tensor::eye(2);
        let v = eval(|t| {
            let a = t.constant(z.clone());
            let b = t.constant(z.clone());
            unsup_contrastive(t, a, b, 1.0)
        });
        assert!((v - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        assert!((v - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn unsup_identical_rows_is_log_batch() {
        let z = Tensor::from_rows(&vec![vec![0.6, 0.8]; 5]).unwrap();
        let v = eval(|t| {
            let a = t.constant(z.clone());
            let b = t.constant(z.clone());
            unsup_contrastive(t, a, b, 0.07)
        });
        assert!((v - 5f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn unsup_matches_oracle_and_gradcheck() {
        let zh = normalized(&random(6, 4, 1));
        let zt = normalized(&random(6, 4, 2));
        let v = eval(|t| {
            let a = t.constant(zh.clone());
            let b = t.constant(zt.clone());
            unsup_contrastive(t, a, b, 0.5)
        });
        assert!((v - unsup_oracle(&zh, &zt, 0.5)).abs() < 1e-12);
        let err = finite_diff_gradcheck_many(|t, v| unsup_contrastive(t, v[0], v[1], 0.5), &[zh, zt], 1e-6).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn unsup_rejects_single_row() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::eye(1));
        assert!(matches!(unsup_contrastive(&mut t, a, a, 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn sup_two_sample_degenerate_is_zero() {
        let z = Tensor::eye(2);
        let v = eval(|t| {
            let a = t.constant(z.clone());
            sup_contrastive(t, a, a, &[3, 3], 1.0)
        });
        assert_eq!(v, 0.0);
    }

    #[test]
    fn sup_class_blocks() {
        let z = Tensor::from_rows(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]).unwrap();
        let labels = [0, 0, 1, 1];
        let v = eval(|t| {
            let a = t.constant(z.clone());
            sup_contrastive(t, a, a, &labels, 1.0)
        });
        // each anchor: one positive at e¹ against two negatives at e⁰
        let expected = (1.0 + 2.0 / std::f64::consts::E).ln();
        assert!((v - expected).abs() < 1e-12);
        assert!((v - sup_oracle(&z, &z, &labels, 1.0)).abs() < 1e-12);
    }

    #[test]
    fn sup_matches_oracle_skipping_singletons() {
        let zh = normalized(&random(7, 3, 3));
        let zt = normalized(&random(7, 3, 4));
        let labels = [0, 1, 0, 2, 1, 0, 4];
        let v = eval(|t| {
            let a = t.constant(zh.clone());
            let b = t.constant(zt.clone());
            sup_contrastive(t, a, b, &labels, 0.1)
        });
        assert!((v - sup_oracle(&zh, &zt, &labels, 0.1)).abs() < 1e-10);
        let err = finite_diff_gradcheck_many(|t, v| sup_contrastive(t, v[0], v[1], &labels, 0.3), &[zh, zt], 1e-6)
            .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn sup_without_positives_is_error() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::eye(3));
        assert!(matches!(sup_contrastive(&mut t, a, a, &[0, 1, 2], 1.0), Err(Error::Contract(_))));
    }

    proptest! {
        #[test]
        fn sup_is_permutation_invariant(seed in 0u64..1000, rot in 1usize..6) {
            let zh = normalized(&random(6, 3, seed));
            let zt = normalized(&random(6, 3, seed + 7));
            let labels = [0, 1, 0, 1, 2, 2];
            let perm: Vec<usize> = (0..6).map(|i| (i + rot) % 6).collect();
            let pl: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
            let a = eval(|t| {
                let x = t.constant(zh.clone());
                let y = t.constant(zt.clone());
                sup_contrastive(t, x, y, &labels, 0.2)
            });
            let b = eval(|t| {
                let x = t.constant(zh.select_rows(&perm));
                let y = t.constant(zt.select_rows(&perm));
                sup_contrastive(t, x, y, &pl, 0.2)
            });
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn classifier_loss_vanishes_at_confident_correct_prediction() {
        let logits = Tensor::from_rows(&[[200.0, 0.0, 0.0], [0.0, 200.0, 0.0]]).unwrap();
        let v = eval(|t| {
            let l = t.constant(logits.clone());
            let lp = t.log_softmax_rows(l, 1.0)?;
            let p = t.value(lp).data().iter().map(|v| v.exp()).collect();
            let p = Tensor::new(2, 3, p)?;
            classifier_losses(t, lp, &p, &[Some(0), Some(1)], 2, 0.35, 0.0)
        });
        assert!(v.abs() < 1e-12, "{v}");
    }

    #[test]
    fn uniform_mean_prediction_has_entropy_log_k() {
        let v = eval(|t| {
            let l = t.constant(Tensor::zeros(3, 4));
            let lp = t.log_softmax_rows(l, 1.0)?;
            mean_entropy(t, lp, &Tensor::filled(3, 4, 0.25))
        });
        assert!((v - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn classifier_losses_match_hand_evaluation() {
        let logits = random(4, 3, 5);
        let p_tilde = Tensor::from_rows(&[[0.2, 0.5, 0.3], [0.1, 0.1, 0.8], [0.6, 0.2, 0.2], [1.0 / 3.0; 3]]).unwrap();
        let labels = [Some(1), None, Some(0), None];
        let (lambda, eps) = (0.35, 0.7);
        let v = eval(|t| {
            let l = t.constant(logits.clone());
            let lp = t.log_softmax_rows(l, 0.1)?;
            classifier_losses(t, lp, &p_tilde, &labels, 2, lambda, eps)
        });

        let p_hat: Vec<Vec<f64>> = (0..4)
            .map(|r| {
                let e: Vec<f64> = logits.row(r).iter().map(|v| (v / 0.1).exp()).collect();
                let z: f64 = e.iter().sum();
                e.iter().map(|v| v / z).collect()
            })
            .collect();
        let ce = |q: &[f64], p: &[f64]| -> f64 { -q.iter().zip(p).map(|(a, b)| a * b.ln()).sum::<f64>() };
        let unsup: f64 = (0..4).map(|r| ce(p_tilde.row(r), &p_hat[r])).sum::<f64>() / 4.0;
        let sup = (-p_hat[0][1].ln() - p_hat[2][0].ln()) / 2.0;
        let p_bar: Vec<f64> = (0..3)
            .map(|k| (0..4).map(|r| p_hat[r][k] + p_tilde.get(r, k)).sum::<f64>() / 8.0)
            .collect();
        let h = -p_bar.iter().map(|p| p * p.ln()).sum::<f64>();
        let expected = (1.0 - lambda) * unsup + lambda * sup - eps * h;
        assert!((v - expected).abs() < 1e-10, "{v} vs {expected}");
    }

    #[test]
    fn classifier_losses_gradcheck_and_label_contract() {
        let logits = random(5, 4, 6);
        let p_tilde = normalized(&random(5, 4, 8));
        let p_tilde = Tensor::new(5, 4, p_tilde.data().iter().map(|v| v * v).collect()).unwrap();
        let labels = [Some(0), None, Some(1), None, None];
        let err = finite_diff_gradcheck(
            |t, l| {
                let lp = t.log_softmax_rows(l, 0.5)?;
                classifier_losses(t, lp, &p_tilde, &labels, 2, 0.35, 1.0)
            },
            &logits,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");

        let mut t = Tape::new();
        let l = t.constant(logits.clone());
        let lp = t.log_softmax_rows(l, 1.0).unwrap();
        let bad = [Some(2), None, None, None, None];
        assert!(matches!(
            classifier_losses(&mut t, lp, &p_tilde, &bad, 2, 0.35, 1.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn mu_id_floors() {
        assert_eq!(mu_id(4, 0.5), 2);
        assert_eq!(mu_id(4, 0.49), 1);
        assert_eq!(mu_id(3, 1.0), 3);
        assert_eq!(mu_id(4, 0.2), 0);
    }

    #[test]
    fn batch_pattern_interleaves_anchors() {
        let w = [0.9, 0.1, 0.8, 0.2, 0.3, 0.4, 0.5, 0.6];
        let b = build_batch(2, &w, 4, 0.5).unwrap();
        use BatchRow::*;
        assert_eq!(b.len(), 6);
        assert_eq!(
            b.order,
            vec![Labeled(0), Unlabeled(0), Unlabeled(2), Labeled(1), Unlabeled(7), Unlabeled(6)]
        );
        assert_eq!(b.w_old, vec![1.0, 0.9, 0.8, 1.0, 0.6, 0.5]);
        assert_eq!(b.labeled_rows(), vec![0, 3]);
        assert_eq!(b.unlabeled_rows(), vec![1, 2, 4, 5]);
    }

    #[test]
    fn zero_mu_id_keeps_only_anchors() {
        let b = build_batch(3, &[0.5; 6], 2, 0.4).unwrap();
        assert_eq!(b.mu_id, 0);
        assert_eq!(b.order, vec![BatchRow::Labeled(0), BatchRow::Labeled(1), BatchRow::Labeled(2)]);
    }

    #[test]
    fn fusion_two_rows() {
        let a = fusion_matrix(&[1.0, 1.0], 0.5);
        assert_eq!(a.data(), &[-0.5, 0.5, 0.5, -0.5]);
        let z = Tensor::from_rows(&[[2.0, 0.0], [0.0, 2.0]]).unwrap();
        let mut t = Tape::new();
        let zv = t.constant(z.clone());
        let out = apply_fusion(&mut t, zv, &a).unwrap();
        assert_eq!(t.value(out).data(), &[1.0, 1.0, 1.0, 1.0]);
        // same product through the plain matmul
        let i_plus_a = Tensor::from_rows(&[[0.5, 0.5], [0.5, 0.5]]).unwrap();
        assert_eq!(i_plus_a.matmul(&z).unwrap(), *t.value(out));
    }

    #[test]
    fn zero_alpha_fusion_is_identity() {
        assert!(fusion_matrix(&[0.3, 0.9, 1.0], 0.0).data().iter().all(|&v| v == 0.0));
        let z = random(3, 4, 9);
        let mut t = Tape::new();
        let zv = t.constant(z.clone());
        let out = apply_fusion(&mut t, zv, &fusion_matrix(&[0.3, 0.9, 1.0], 0.0)).unwrap();
        assert!(t.value(out).data().iter().zip(z.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn zero_weight_row_is_untouched() {
        let z = random(4, 3, 10);
        let a = fusion_matrix(&[0.5, 0.0, 1.0, 0.7], 0.8);
        let mut t = Tape::new();
        let zv = t.constant(z.clone());
        let out = apply_fusion(&mut t, zv, &a).unwrap();
        assert_eq!(t.value(out).row(1), z.row(1));
    }

    proptest! {
        #[test]
        fn fused_rows_are_affine(w in prop::collection::vec(0.0f64..=1.0, 1..10), alpha in 0.0f64..=1.0) {
            let a = fusion_matrix(&w, alpha);
            for i in 0..w.len() {
                let s: f64 = 1.0 + a.row(i).iter().sum::<f64>();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    fn toy_batch() -> FusedBatch {
        build_batch(2, &[0.9, 0.2, 0.7, 0.6, 0.0, 0.4], 3, 0.67).unwrap()
    }

    #[test]
    fn deltas_vanish_for_identical_views_and_agree_at_zero_alpha() {
        let b = toy_batch();
        let z = random(b.len(), 3, 11);
        let mut t = Tape::new();
        let zv = t.constant(z.clone());
        let (l, u) = behavioral_deltas(&mut t, zv, zv, &b, 0.3).unwrap();
        assert!(t.value(l).data().iter().chain(t.value(u).data()).all(|&v| v == 0.0));

        let zs = t.constant(random(b.len(), 3, 12));
        let (_, u0) = behavioral_deltas(&mut t, zv, zs, &b, 0.0).unwrap();
        let raw = t.sub(zv, zs).unwrap();
        let raw_u = t.select_rows(raw, &b.unlabeled_rows()).unwrap();
        assert!(t
            .value(u0)
            .data()
            .iter()
            .zip(t.value(raw_u).data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn align_through_deltas_gradcheck() {
        let b = toy_batch();
        let zw = random(b.len(), 3, 13);
        let zs = random(b.len(), 3, 14);
        let w = b.partner_weights();
        let err = finite_diff_gradcheck_many(
            |t, v| {
                let (l, u) = behavioral_deltas(t, v[0], v[1], &b, 0.3)?;
                Ok(align_loss(t, l, u, &w, b.mu_id)?.expect("weights present"))
            },
            &[zw, zs],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    fn align_value(dl: &[&[f64]], du: &[&[f64]], w: &[f64], mu_id: usize) -> Option<f64> {
        let mut t = Tape::new();
        let l = t.constant(Tensor::from_rows(dl).unwrap());
        let u = t.constant(Tensor::from_rows(du).unwrap());
        align_loss(&mut t, l, u, w, mu_id).unwrap().map(|v| t.value(v).item())
    }

    #[test]
    fn align_examples() {
        assert_eq!(align_value(&[&[1.0, 0.0]], &[&[0.0, 1.0]], &[1.0], 1), Some(2.0));
        assert_eq!(align_value(&[&[1.0, 0.0]], &[&[2.0, 0.0], &[0.0, 0.0]], &[1.0, 1.0], 2), Some(0.0));
        assert_eq!(align_value(&[&[1.0, 2.0]], &[&[1.0, 2.0], &[1.0, 2.0]], &[0.3, 0.9], 2), Some(0.0));
    }

    #[test]
    fn align_skips_zero_weight_anchors() {
        // second anchor has zero weight; only the first counts
        let v = align_value(&[&[1.0, 0.0], &[5.0, 5.0]], &[&[0.0, 1.0], &[0.0, 0.0]], &[1.0, 0.0], 1);
        assert_eq!(v, Some(2.0));
        assert_eq!(align_value(&[&[1.0, 0.0]], &[&[0.0, 1.0]], &[0.0], 1), None);
    }

    #[test]
    fn similarity_examples() {
        let tau = 0.07;
        assert!((pairwise_similarity(&[1.0, 2.0], &[2.0, 4.0], tau) - (1.0 / tau).exp()).abs() < 1e-6);
        assert_eq!(pairwise_similarity(&[1.0, 0.0], &[0.0, 3.0], tau), 1.0);
        let (a, b) = (random(1, 5, 15), random(1, 5, 16));
        assert_eq!(pairwise_similarity(a.data(), b.data(), tau), pairwise_similarity(b.data(), a.data(), tau));
    }

    fn discovery_value(h: &Tensor, r: &Tensor, w: &[f64], tau: f64) -> f64 {
        let p = pair_weights(h, w, tau).unwrap();
        eval(|t| {
            let rv = t.constant(r.clone());
            discovery_loss(t, rv, &p)
        })
    }

    #[test]
    fn discovery_two_sample_example() {
        let h = Tensor::eye(2);
        let r = Tensor::eye(2);
        assert_eq!(discovery_value(&h, &r, &[1.0, 1.0], 1.0), 4.0);
    }

    #[test]
    fn discovery_zero_cases() {
        let h = random(5, 4, 17);
        let same = Tensor::from_rows(&vec![vec![0.1, -0.4, 0.3]; 5]).unwrap();
        assert_eq!(discovery_value(&h, &same, &[0.5; 5], 0.07), 0.0);
        assert_eq!(discovery_value(&h, &random(5, 3, 18), &[0.0; 5], 0.07), 0.0);
    }

    proptest! {
        #[test]
        fn discovery_matches_double_loop(seed in 0u64..500, n in 2usize..=16) {
            let h = random(n, 6, seed);
            let r = random(n, 3, seed + 1000);
            let w: Vec<f64> = random(1, n, seed + 2000).data().iter().map(|v| v.abs()).collect();
            let a = discovery_value(&h, &r, &w, 0.07);
            let b = discovery_oracle(&h, &r, &w, 0.07);
            prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{} vs {}", a, b);
            prop_assert!(a >= 0.0);
        }

        #[test]
        fn discovery_is_permutation_invariant(seed in 0u64..500, rot in 1usize..5) {
            let h = random(5, 4, seed);
            let r = random(5, 3, seed + 1);
            let w = [0.2, 0.9, 0.5, 0.1, 0.7];
            let perm: Vec<usize> = (0..5).map(|i| (i + rot) % 5).collect();
            let pw: Vec<f64> = perm.iter().map(|&i| w[i]).collect();
            let a = discovery_value(&h, &r, &w, 0.5);
            let b = discovery_value(&h.select_rows(&perm), &r.select_rows(&perm), &pw, 0.5);
            prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
        }
    }

    #[test]
    fn discovery_gradcheck() {
        let h = random(5, 4, 19);
        let r = random(5, 3, 20);
        let w = [0.2, 0.9, 0.5, 0.1, 0.7];
        let p = pair_weights(&h, &w, 0.5).unwrap();
        let err = finite_diff_gradcheck_many(|t, v| discovery_loss(t, v[0], &p), &[r], 1e-6).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    fn scalars(t: &mut Tape, v: [f64; 5]) -> LossTerms {
        LossTerms {
            rep_u: t.constant(Tensor::scalar(v[0])),
            rep_s: t.constant(Tensor::scalar(v[1])),
            cls: t.constant(Tensor::scalar(v[2])),
            align: Some(t.constant(Tensor::scalar(v[3]))),
            new: Some(t.constant(Tensor::scalar(v[4]))),
        }
    }

    #[test]
    fn total_loss_arithmetic() {
        let v = [1.3, 0.7, 2.1, 0.4, 5.0];
        let w = LossWeights::default();
        let got = eval(|t| {
            let terms = scalars(t, v);
            total_loss(t, &terms, &w)
        });
        let want = (1.0 - 0.35) * 1.3 + 0.35 * 0.7 + 2.1 + 0.5 * 0.4 + 0.3 * 5.0;
        assert!((got - want).abs() < 1e-12);
        let zero = eval(|t| {
            let terms = scalars(t, [0.0; 5]);
            total_loss(t, &terms, &w)
        });
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn total_loss_reduces_to_baseline_bit_exactly() {
        let w = LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            ..LossWeights::default()
        };
        let v = [1.3, 0.7, 2.1, 0.4, 5.0];
        let with = eval(|t| {
            let terms = scalars(t, v);
            total_loss(t, &terms, &w)
        });
        let without = eval(|t| {
            let mut terms = scalars(t, v);
            terms.align = None;
            terms.new = None;
            total_loss(t, &terms, &w)
        });
        assert_eq!(with.to_bits(), without.to_bits());
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { lambda: 1.5, ..Default::default() }.validate().is_err());
        assert!(LossWeights { tau_u: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights { lambda2: -1.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights { rho_id: Some(2.0), ..Default::default() }.validate().is_err());
    }
}
