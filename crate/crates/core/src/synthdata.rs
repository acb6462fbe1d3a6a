//! Synthetic GCD worlds: Gaussian class clusters, the labeled/unlabeled
//! split, vector-space augmentations and the dataset file format.
//!
//! Class centers sit on a sphere; when `K ≤ dim` they are orthogonal, so
//! every pair of centers is exactly `class_separation` apart. Samples are
//! `center + N(0, I)`, which makes the separation read in units of the
//! within-class standard deviation.
//!
//! Ground-truth classes of unlabeled samples live in [`HiddenTruth`], a
//! separate value from the training view [`GcdSplit`]. Training code only
//! ever receives the latter.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::seq::SliceRandom;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

const MAGIC: &str = "RPCGCD1";
const TRUTH_MAGIC: &str = "RPCGCD1-TRUTH";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    /// Total number of classes `K`, known plus novel.
    pub num_classes_total: usize,
    /// Number of labeled (known) classes.
    pub num_known: usize,
    pub dim_input: usize,
    pub samples_per_class: usize,
    /// Distance between class centers, in within-class standard deviations.
    pub class_separation: f64,
    /// Fraction of each known class that carries labels.
    pub labeled_fraction: f64,
    /// Set from the run's root seed rather than read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            num_classes_total: 10,
            num_known: 5,
            dim_input: 32,
            samples_per_class: 100,
            class_separation: 10.0,
            labeled_fraction: 0.5,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn labeled_per_class(&self) -> usize {
        (self.samples_per_class as f64 * self.labeled_fraction).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_known < 1 || self.num_known >= self.num_classes_total {
            return Err(Error::Config(format!(
                "need 1 <= num_known < num_classes_total, got {} and {}",
                self.num_known, self.num_classes_total
            )));
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "labeled_fraction must lie in (0, 1], got {}",
                self.labeled_fraction
            )));
        }
        if self.dim_input == 0 {
            return Err(Error::Config("dim_input must be positive".into()));
        }
        if !(self.class_separation >= 0.0 && self.class_separation.is_finite()) {
            return Err(Error::Config("class_separation must be finite and >= 0".into()));
        }
        if self.labeled_per_class() < 1 {
            return Err(Error::Config(format!(
                "samples_per_class ({}) x labeled_fraction ({}) leaves no labeled sample",
                self.samples_per_class, self.labeled_fraction
            )));
        }
        Ok(())
    }
}

/// Training view of a world. Unlabeled samples carry no class information.
#[derive(Clone, Debug, PartialEq)]
pub struct GcdSplit {
    pub num_classes_total: usize,
    pub num_known: usize,
    pub seed: u64,
    pub labeled_x: Tensor,
    pub labeled_y: Vec<usize>,
    pub unlabeled_x: Tensor,
}

impl GcdSplit {
    pub fn dim(&self) -> usize {
        self.labeled_x.cols()
    }

    pub fn num_labeled(&self) -> usize {
        self.labeled_x.rows()
    }

    pub fn num_unlabeled(&self) -> usize {
        self.unlabeled_x.rows()
    }
}

/// Evaluation-only labels for the unlabeled pool, in pool order.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenTruth {
    pub labels: Vec<usize>,
    pub known_mask: Vec<bool>,
}

impl HiddenTruth {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn known_fraction(&self) -> f64 {
        let known = self.known_mask.iter().filter(|&&k| k).count();
        known as f64 / self.labels.len().max(1) as f64
    }
}

/// A generated world plus the class centers it was drawn around.
#[derive(Clone, Debug)]
pub struct World {
    pub split: GcdSplit,
    pub truth: HiddenTruth,
    pub centers: Tensor,
    /// Class of every labeled sample, then every unlabeled one.
    pub all_labels: Vec<usize>,
}

fn class_centers(cfg: &WorldConfig, rng: &mut rng::Rng) -> Tensor {
    let (k, d) = (cfg.num_classes_total, cfg.dim_input);
    let radius = cfg.class_separation / std::f64::consts::SQRT_2;
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        if k <= d {
            for u in &dirs {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (vi, ui) in v.iter_mut().zip(u) {
                    *vi -= dot * ui;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        dirs.push(v);
    }
    let mut centers = Tensor::from_rows(&dirs).expect("rows share dim");
    centers.data_mut().iter_mut().for_each(|x| *x *= radius);
    centers
}

/// Generates a world; a pure function of `cfg`.
pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let mut center_rng = rng::stream(cfg.seed, "world.centers", 0);
    let centers = class_centers(cfg, &mut center_rng);

    let mut sample_rng = rng::stream(cfg.seed, "world.samples", 0);
    let n_lab = cfg.labeled_per_class();
    let mut labeled: Vec<(Vec<f64>, usize)> = Vec::new();
    let mut unlabeled: Vec<(Vec<f64>, usize)> = Vec::new();
    for class in 0..cfg.num_classes_total {
        let center = centers.row(class);
        for i in 0..cfg.samples_per_class {
            let x: Vec<f64> = center
                .iter()
                .map(|&c| c + sample_rng.sample::<f64, _>(StandardNormal))
                .collect();
            if class < cfg.num_known && i < n_lab {
                labeled.push((x, class));
            } else {
                unlabeled.push((x, class));
            }
        }
    }

    let mut shuffle_rng = rng::stream(cfg.seed, "world.shuffle", 0);
    labeled.shuffle(&mut shuffle_rng);
    unlabeled.shuffle(&mut shuffle_rng);

    let to_tensor = |rows: &[(Vec<f64>, usize)]| {
        let mut data = Vec::with_capacity(rows.len() * cfg.dim_input);
        for (x, _) in rows {
            data.extend_from_slice(x);
        }
        Tensor::new(rows.len(), cfg.dim_input, data)
    };

    let labels: Vec<usize> = unlabeled.iter().map(|(_, c)| *c).collect();
    let split = GcdSplit {
        num_classes_total: cfg.num_classes_total,
        num_known: cfg.num_known,
        seed: cfg.seed,
        labeled_x: to_tensor(&labeled)?,
        labeled_y: labeled.iter().map(|(_, c)| *c).collect(),
        unlabeled_x: to_tensor(&unlabeled)?,
    };
    let truth = HiddenTruth {
        known_mask: labels.iter().map(|&c| c < cfg.num_known).collect(),
        labels,
    };
    let all_labels = split
        .labeled_y
        .iter()
        .chain(&truth.labels)
        .copied()
        .collect();
    Ok(World {
        split,
        truth,
        centers,
        all_labels,
    })
}

/// Assigns each row to its nearest center; used to confirm a world is
/// separable before trusting end-to-end numbers on it.
pub fn nearest_center_accuracy(x: &Tensor, labels: &[usize], centers: &Tensor) -> f64 {
    let mut correct = 0usize;
    for (r, &y) in labels.iter().enumerate() {
        let row = x.row(r);
        let best = (0..centers.rows())
            .map(|c| {
                let d: f64 = row
                    .iter()
                    .zip(centers.row(c))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                (c, d)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(c, _)| c)
            .unwrap_or(0);
        correct += usize::from(best == y);
    }
    correct as f64 / labels.len().max(1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewKind {
    Weak,
    Strong,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub sigma_weak: f64,
    pub sigma_strong: f64,
    pub drop_prob_strong: f64,
    pub scale_jitter_strong: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            sigma_weak: 0.1,
            sigma_strong: 0.4,
            drop_prob_strong: 0.1,
            scale_jitter_strong: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_weak >= 0.0 && self.sigma_weak < self.sigma_strong) {
            return Err(Error::Config(format!(
                "need 0 <= sigma_weak < sigma_strong, got {} and {}",
                self.sigma_weak, self.sigma_strong
            )));
        }
        if !(0.0..=0.5).contains(&self.drop_prob_strong) {
            return Err(Error::Config(format!(
                "drop_prob_strong must lie in [0, 0.5], got {}",
                self.drop_prob_strong
            )));
        }
        if !(0.0..=1.0).contains(&self.scale_jitter_strong) {
            return Err(Error::Config(format!(
                "scale_jitter_strong must lie in [0, 1], got {}",
                self.scale_jitter_strong
            )));
        }
        Ok(())
    }
}

/// One concrete draw of a weak or strong transform. A batch samples one
/// instance per strength and applies it to every row.
#[derive(Clone, Debug, PartialEq)]
pub struct Augmentation {
    scale: Option<Vec<f64>>,
    noise: Option<Vec<f64>>,
    keep: Option<Vec<bool>>,
}

impl Augmentation {
    pub fn sample<R: Rng + ?Sized>(kind: ViewKind, cfg: &AugmentConfig, dim: usize, rng: &mut R) -> Self {
        let gaussian = |sigma: f64, rng: &mut R| {
            (sigma > 0.0).then(|| {
                (0..dim)
                    .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
        };
        match kind {
            ViewKind::Weak => Augmentation {
                scale: None,
                noise: gaussian(cfg.sigma_weak, rng),
                keep: None,
            },
            ViewKind::Strong => {
                let j = cfg.scale_jitter_strong;
                let scale = (j > 0.0).then(|| {
                    (0..dim)
                        .map(|_| 1.0 - j + 2.0 * j * rng.random::<f64>())
                        .collect()
                });
                let noise = gaussian(cfg.sigma_strong, rng);
                let p = cfg.drop_prob_strong;
                let keep = (p > 0.0).then(|| (0..dim).map(|_| rng.random::<f64>() >= p).collect());
                Augmentation { scale, noise, keep }
            }
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = x.to_vec();
        if let Some(s) = &self.scale {
            out.iter_mut().zip(s).for_each(|(v, s)| *v *= s);
        }
        if let Some(n) = &self.noise {
            out.iter_mut().zip(n).for_each(|(v, n)| *v += n);
        }
        if let Some(k) = &self.keep {
            out.iter_mut().zip(k).for_each(|(v, &keep)| {
                if !keep {
                    *v = 0.0
                }
            });
        }
        out
    }

    pub fn apply_rows(&self, x: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            out.row_mut(r).copy_from_slice(&self.apply(x.row(r)));
        }
        out
    }
}

/// Weak: `x + N(0, σ_w²)`. Strong: per-coordinate scale in `[1−j, 1+j]`,
/// then `N(0, σ_s²)` noise, then coordinates zeroed with probability `p`.
pub fn augment<R: Rng + ?Sized>(x: &[f64], kind: ViewKind, cfg: &AugmentConfig, rng: &mut R) -> Vec<f64> {
    Augmentation::sample(kind, cfg, x.len(), rng).apply(x)
}

/// Sibling path holding hidden labels, `<path>.truth`.
pub fn truth_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".truth");
    PathBuf::from(s)
}

pub fn save_dataset(split: &GcdSplit, path: &Path) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "magic={MAGIC}");
    let _ = writeln!(out, "dim={}", split.dim());
    let _ = writeln!(out, "num_classes_total={}", split.num_classes_total);
    let _ = writeln!(out, "num_known={}", split.num_known);
    let _ = writeln!(out, "labeled={}", split.num_labeled());
    let _ = writeln!(out, "unlabeled={}", split.num_unlabeled());
    let _ = writeln!(out, "seed={}", split.seed);
    out.push('\n');
    let mut push_row = |tag: &str, class: i64, row: &[f64]| {
        let _ = write!(out, "{tag},{class}");
        for v in row {
            let _ = write!(out, ",{v:?}");
        }
        out.push('\n');
    };
    for (r, &y) in split.labeled_y.iter().enumerate() {
        push_row("L", y as i64, split.labeled_x.row(r));
    }
    for r in 0..split.num_unlabeled() {
        push_row("U", -1, split.unlabeled_x.row(r));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn save_truth(truth: &HiddenTruth, path: &Path) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "magic={TRUTH_MAGIC}");
    let _ = writeln!(out, "count={}", truth.len());
    out.push('\n');
    for (&c, &k) in truth.labels.iter().zip(&truth.known_mask) {
        let _ = writeln!(out, "{c},{}", u8::from(k));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Line iterator that remembers where each line starts.
struct Lines<'a> {
    text: &'a str,
    offset: usize,
    line_no: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Lines {
            text,
            offset: 0,
            line_no: 0,
        }
    }

    /// `(line number, byte offset, content)` of the next line.
    fn next_line(&mut self) -> Option<(usize, usize, &'a str)> {
        if self.offset >= self.text.len() {
            return None;
        }
        let rest = &self.text[self.offset..];
        let (line, advance) = match rest.find('\n') {
            Some(i) => (&rest[..i], i + 1),
            None => (rest, rest.len()),
        };
        let start = self.offset;
        self.offset += advance;
        self.line_no += 1;
        Some((self.line_no, start, line.strip_suffix('\r').unwrap_or(line)))
    }

    fn here(&self) -> String {
        format!("line {}, byte {}", self.line_no + 1, self.offset)
    }
}

fn loc(line: usize, byte: usize) -> String {
    format!("line {line}, byte {byte}")
}

fn read_header(lines: &mut Lines<'_>, magic: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    loop {
        let Some((no, off, line)) = lines.next_line() else {
            return Err(Error::parse(lines.here(), "header not terminated by a blank line"));
        };
        if line.is_empty() {
            break;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::parse(loc(no, off), format!("expected key=value, got `{line}`")));
        };
        if pairs.is_empty() && (k != "magic" || v != magic) {
            return Err(Error::parse(loc(no, off), format!("bad magic, expected magic={magic}")));
        }
        pairs.push((k.to_string(), v.to_string()));
    }
    if pairs.is_empty() {
        return Err(Error::parse(loc(1, 0), "empty header"));
    }
    Ok(pairs)
}

fn header_value<T: std::str::FromStr>(pairs: &[(String, String)], key: &str) -> Result<T> {
    let raw = pairs
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v)
        .ok_or_else(|| Error::parse("header", format!("missing key `{key}`")))?;
    raw.parse()
        .map_err(|_| Error::parse("header", format!("bad value `{raw}` for `{key}`")))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<GcdSplit> {
    parse_dataset(&read_text(path)?)
}

pub fn load_truth(path: &Path) -> Result<HiddenTruth> {
    parse_truth(&read_text(path)?)
}

pub fn parse_dataset(text: &str) -> Result<GcdSplit> {
    let mut lines = Lines::new(text);
    let header = read_header(&mut lines, MAGIC)?;
    let dim: usize = header_value(&header, "dim")?;
    let n_lab: usize = header_value(&header, "labeled")?;
    let n_unl: usize = header_value(&header, "unlabeled")?;
    let num_classes_total: usize = header_value(&header, "num_classes_total")?;
    let num_known: usize = header_value(&header, "num_known")?;
    let seed: u64 = header_value(&header, "seed")?;

    let mut lab = Vec::with_capacity(n_lab * dim);
    let mut labels = Vec::with_capacity(n_lab);
    let mut unl = Vec::with_capacity(n_unl * dim);
    while let Some((no, off, line)) = lines.next_line() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 2 {
            return Err(Error::parse(
                loc(no, off),
                format!("expected {} columns, found {}", dim + 2, fields.len()),
            ));
        }
        let class: i64 = fields[1]
            .parse()
            .map_err(|_| Error::parse(loc(no, off), format!("bad class `{}`", fields[1])))?;
        let mut values = Vec::with_capacity(dim);
        for f in &fields[2..] {
            let v: f64 = f
                .parse()
                .map_err(|_| Error::parse(loc(no, off), format!("bad number `{f}`")))?;
            values.push(v);
        }
        match fields[0] {
            "L" => {
                if class < 0 || class as usize >= num_known {
                    return Err(Error::parse(
                        loc(no, off),
                        format!("labeled class {class} outside known range 0..{num_known}"),
                    ));
                }
                labels.push(class as usize);
                lab.extend(values);
            }
            "U" => {
                if class != -1 {
                    return Err(Error::parse(loc(no, off), "unlabeled rows must carry class -1"));
                }
                unl.extend(values);
            }
            other => {
                return Err(Error::parse(loc(no, off), format!("unknown split tag `{other}`")))
            }
        }
    }
    if labels.len() != n_lab || unl.len() != n_unl * dim {
        return Err(Error::parse(
            lines.here(),
            format!(
                "truncated: header promises {n_lab} labeled and {n_unl} unlabeled rows, found {} and {}",
                labels.len(),
                unl.len() / dim.max(1)
            ),
        ));
    }
    Ok(GcdSplit {
        num_classes_total,
        num_known,
        seed,
        labeled_x: Tensor::new(n_lab, dim, lab)?,
        labeled_y: labels,
        unlabeled_x: Tensor::new(n_unl, dim, unl)?,
    })
}

pub fn parse_truth(text: &str) -> Result<HiddenTruth> {
    let mut lines = Lines::new(text);
    let header = read_header(&mut lines, TRUTH_MAGIC)?;
    let count: usize = header_value(&header, "count")?;
    let mut labels = Vec::with_capacity(count);
    let mut known_mask = Vec::with_capacity(count);
    while let Some((no, off, line)) = lines.next_line() {
        if line.is_empty() {
            continue;
        }
        let bad = || Error::parse(loc(no, off), format!("expected `class,known`, got `{line}`"));
        let (c, k) = line.split_once(',').ok_or_else(bad)?;
        labels.push(c.parse().map_err(|_| bad())?);
        known_mask.push(match k {
            "0" => false,
            "1" => true,
            _ => return Err(bad()),
        });
    }
    if labels.len() != count {
        return Err(Error::parse(
            lines.here(),
            format!("truncated: expected {count} rows, found {}", labels.len()),
        ));
    }
    Ok(HiddenTruth { labels, known_mask })
}
