//! Foreground-map and saliency metrics plus dataset-level aggregation.
//!
//! `weighted_fscore` with [`Weighting::Uniform`] is the plain F-β over pixel
//! confusion counts. [`Weighting::DistanceGaussian`] follows the weighted
//! F-measure of the foreground-map evaluation literature: errors are
//! propagated from the nearest ground-truth pixel, smoothed by a 7×7 Gaussian
//! of width `sigma`, and background errors are scaled by `2 − exp(alpha·d)`
//! where `d` is the Euclidean distance to the ground-truth foreground.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{self, confusion_counts, BinaryMask, GroundingStatus, ModelError, SaliencyMap};
use crate::par::{map_ordered, Execution};

pub use crate::model::normalize_to_distribution;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("ground truth has no foreground; the F-score is undefined")]
    UndefinedGroundTruth,
    #[error("{which} map sums to {sum}, not 1")]
    NotNormalized { which: &'static str, sum: f64 },
    #[error("prediction has zero variance")]
    DegenerateMap,
    #[error("fixation set is empty")]
    EmptyFixations,
    #[error("invalid metric config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Weighting {
    Uniform,
    DistanceGaussian { sigma: f64, alpha: f64 },
}

impl Weighting {
    pub fn distance_gaussian_default() -> Weighting {
        Weighting::DistanceGaussian {
            sigma: 5.0,
            alpha: 0.5f64.ln() / 5.0,
        }
    }
}

fn default_beta() -> f64 {
    1.0
}

fn default_weighting() -> Weighting {
    Weighting::Uniform
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricConfig {
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_weighting")]
    pub weighting: Weighting,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            beta: 1.0,
            weighting: Weighting::Uniform,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<(), MetricError> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(MetricError::Config(format!("beta must be > 0, got {}", self.beta)));
        }
        if let Weighting::DistanceGaussian { sigma, alpha } = self.weighting {
            if !(sigma > 0.0 && sigma.is_finite()) {
                return Err(MetricError::Config(format!("sigma must be > 0, got {sigma}")));
            }
            if !alpha.is_finite() {
                return Err(MetricError::Config("alpha must be finite".into()));
            }
        }
        Ok(())
    }
}

pub fn weighted_fscore(pred: &BinaryMask, gt: &BinaryMask, cfg: &MetricConfig) -> Result<f64, MetricError> {
    cfg.validate()?;
    pred.same_shape(gt)?;
    if gt.area() == 0 {
        return Err(MetricError::UndefinedGroundTruth);
    }
    if pred.area() == 0 {
        return Ok(0.0);
    }
    let b2 = cfg.beta * cfg.beta;
    match cfg.weighting {
        Weighting::Uniform => {
            let c = confusion_counts(pred, gt)?;
            let (tp, fp, fn_) = (c.tp as f64, c.fp as f64, c.fn_ as f64);
            // (1+β²)PR / (β²P + R) with P = tp/(tp+fp), R = tp/(tp+fn).
            let num = (1.0 + b2) * tp;
            let den = num + b2 * fn_ + fp;
            Ok(if den > 0.0 { num / den } else { 0.0 })
        }
        Weighting::DistanceGaussian { sigma, alpha } => {
            let (p, r) = weighted_precision_recall(pred, gt, sigma, alpha);
            let den = b2 * p + r;
            Ok(if den > 0.0 { ((1.0 + b2) * p * r / den).clamp(0.0, 1.0) } else { 0.0 })
        }
    }
}

const GAUSS_WINDOW: usize = 7;

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (GAUSS_WINDOW / 2) as isize;
    let mut k = Vec::with_capacity(GAUSS_WINDOW * GAUSS_WINDOW);
    for dy in -r..=r {
        for dx in -r..=r {
            k.push((-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp());
        }
    }
    let s: f64 = k.iter().sum();
    k.iter().map(|x| x / s).collect()
}

fn weighted_precision_recall(pred: &BinaryMask, gt: &BinaryMask, sigma: f64, alpha: f64) -> (f64, f64) {
    let (w, h) = (gt.width(), gt.height());
    let g = gt.bits();
    let e: Vec<f64> = pred
        .bits()
        .iter()
        .zip(g)
        .map(|(p, q)| if p != q { 1.0 } else { 0.0 })
        .collect();
    let (dist2, nearest) = distance_transform(gt);
    // Background pixels inherit the error of their nearest foreground pixel.
    let et: Vec<f64> = (0..w * h).map(|i| if g[i] { e[i] } else { e[nearest[i]] }).collect();
    let kernel = gaussian_kernel(sigma);
    let r = (GAUSS_WINDOW / 2) as isize;
    let mut ew = vec![0.0; w * h];
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            let value = if g[i] {
                let mut ea = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (x, y) = (u as isize + dx, v as isize + dy);
                        if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
                            let k = kernel[((dy + r) as usize) * GAUSS_WINDOW + (dx + r) as usize];
                            ea += k * et[y as usize * w + x as usize];
                        }
                    }
                }
                ea.min(e[i])
            } else {
                e[i] * (2.0 - (alpha * dist2[i].sqrt()).exp())
            };
            ew[i] = value;
        }
    }
    let n_fg = gt.area() as f64;
    let err_fg: f64 = (0..w * h).filter(|&i| g[i]).map(|i| ew[i]).sum();
    let err_bg: f64 = (0..w * h).filter(|&i| !g[i]).map(|i| ew[i]).sum();
    let tpw = n_fg - err_fg;
    let recall = 1.0 - err_fg / n_fg;
    let precision = if tpw + err_bg > 0.0 { tpw / (tpw + err_bg) } else { 0.0 };
    (precision, recall)
}

/// Exact squared Euclidean distance from every pixel to the nearest
/// foreground pixel of `mask`, with the row-major index of that pixel.
/// `mask` must have at least one foreground pixel.
pub fn distance_transform(mask: &BinaryMask) -> (Vec<f64>, Vec<usize>) {
    let (w, h) = (mask.width(), mask.height());
    // Column pass: nearest foreground row within each column.
    let mut col_row: Vec<Option<usize>> = vec![None; w * h];
    for u in 0..w {
        let mut last: Option<usize> = None;
        for v in 0..h {
            if mask.get(u, v) {
                last = Some(v);
            }
            col_row[v * w + u] = last;
        }
        let mut next: Option<usize> = None;
        for v in (0..h).rev() {
            if mask.get(u, v) {
                next = Some(v);
            }
            let i = v * w + u;
            col_row[i] = match (col_row[i], next) {
                (Some(a), Some(b)) => Some(if v - a <= b - v { a } else { b }),
                (a, b) => a.or(b),
            };
        }
    }
    let mut dist2 = vec![f64::INFINITY; w * h];
    let mut nearest = vec![usize::MAX; w * h];
    // Row pass: lower envelope of parabolas (u - q)^2 + f(q).
    let mut hull_q: Vec<usize> = Vec::with_capacity(w);
    let mut hull_z: Vec<f64> = Vec::with_capacity(w + 1);
    for v in 0..h {
        let f = |q: usize| -> f64 {
            match col_row[v * w + q] {
                Some(r) => {
                    let d = r as f64 - v as f64;
                    d * d
                }
                None => f64::INFINITY,
            }
        };
        hull_q.clear();
        hull_z.clear();
        for q in 0..w {
            let fq = f(q);
            if !fq.is_finite() {
                continue;
            }
            loop {
                match hull_q.last() {
                    None => {
                        hull_q.push(q);
                        hull_z.push(f64::NEG_INFINITY);
                        break;
                    }
                    Some(&p) => {
                        let fp = f(p);
                        let s = ((fq + (q * q) as f64) - (fp + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
                        if s <= *hull_z.last().expect("parallel stacks") {
                            hull_q.pop();
                            hull_z.pop();
                        } else {
                            hull_q.push(q);
                            hull_z.push(s);
                            break;
                        }
                    }
                }
            }
        }
        let mut k = 0;
        for u in 0..w {
            while k + 1 < hull_q.len() && hull_z[k + 1] < u as f64 {
                k += 1;
            }
            let q = hull_q[k];
            let du = u as f64 - q as f64;
            let i = v * w + u;
            dist2[i] = du * du + f(q);
            nearest[i] = col_row[v * w + q].expect("finite column") * w + q;
        }
    }
    (dist2, nearest)
}

const NORMALIZATION_TOL: f64 = 1e-6;

fn check_distribution(which: &'static str, m: &SaliencyMap) -> Result<(), MetricError> {
    let sum = m.sum();
    if (sum - 1.0).abs() > NORMALIZATION_TOL {
        return Err(MetricError::NotNormalized { which, sum });
    }
    Ok(())
}

fn check_pair(pred: &SaliencyMap, gt: &SaliencyMap) -> Result<(), MetricError> {
    model::shape_check((pred.width(), pred.height()), (gt.width(), gt.height()))?;
    check_distribution("prediction", pred)?;
    check_distribution("ground-truth", gt)
}

pub const KLD_EPSILON: f64 = 1e-12;

/// `Σ gt·ln(gt / (pred + ε))` over pixels where `gt > 0`.
pub fn kld(pred: &SaliencyMap, gt: &SaliencyMap, epsilon: f64) -> Result<f64, MetricError> {
    check_pair(pred, gt)?;
    Ok(pred
        .values()
        .iter()
        .zip(gt.values())
        .filter(|(_, g)| **g > 0.0)
        .map(|(p, g)| g * (g / (p + epsilon)).ln())
        .sum())
}

/// Histogram intersection `Σ min(pred, gt)`.
pub fn sim(pred: &SaliencyMap, gt: &SaliencyMap) -> Result<f64, MetricError> {
    check_pair(pred, gt)?;
    Ok(pred
        .values()
        .iter()
        .zip(gt.values())
        .map(|(p, g)| p.min(*g))
        .sum())
}

/// Mean of the standardized prediction (zero mean, unit population standard
/// deviation) over the fixation pixels.
pub fn nss(pred: &SaliencyMap, fixations: &BinaryMask) -> Result<f64, MetricError> {
    model::shape_check((pred.width(), pred.height()), (fixations.width(), fixations.height()))?;
    let n_fix = fixations.area();
    if n_fix == 0 {
        return Err(MetricError::EmptyFixations);
    }
    let vals = pred.values();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let scale = vals.iter().fold(mean.abs(), |a, x| a.max(x.abs()));
    if !(std > 1e-12 * scale.max(f64::MIN_POSITIVE)) {
        return Err(MetricError::DegenerateMap);
    }
    let total: f64 = vals
        .iter()
        .zip(fixations.bits())
        .filter(|(_, f)| **f)
        .map(|(x, _)| (x - mean) / std)
        .sum();
    Ok(total / n_fix as f64)
}

/// Heatmap ground truth without an explicit fixation mask: pixels at or above
/// half the peak value.
pub fn fixations_from_heatmap(gt: &SaliencyMap) -> BinaryMask {
    gt.threshold_relative(0.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaliencyScores {
    pub kld: f64,
    pub sim: f64,
    pub nss: f64,
}

/// KLD, SIM and NSS of a binary prediction against a heatmap ground truth.
pub fn saliency_scores(pred: &BinaryMask, gt: &SaliencyMap) -> Result<SaliencyScores, MetricError> {
    let p = normalize_to_distribution(pred)?;
    let g = normalize_to_distribution(gt)?;
    Ok(SaliencyScores {
        kld: kld(&p, &g, KLD_EPSILON)?,
        sim: sim(&p, &g)?,
        nss: nss(&SaliencyMap::from_mask(pred), &fixations_from_heatmap(gt))?,
    })
}

/// Batch F-scores over `(pred, gt)` pairs, in input order.
pub fn batch_fscore(
    pairs: &[(BinaryMask, BinaryMask)],
    cfg: &MetricConfig,
    exec: Execution,
) -> Vec<Result<f64, MetricError>> {
    map_ordered(pairs, exec, |(p, g)| weighted_fscore(p, g, cfg))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RowStatus {
    Succeeded,
    NoObjectDetected,
    NoObjectSelected,
    PartNotFound,
    TransportFailure,
}

impl RowStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            RowStatus::Succeeded => "Succeeded",
            RowStatus::NoObjectDetected => "NoObjectDetected",
            RowStatus::NoObjectSelected => "NoObjectSelected",
            RowStatus::PartNotFound => "PartNotFound",
            RowStatus::TransportFailure => "TransportFailure",
        }
    }
}

impl From<GroundingStatus> for RowStatus {
    fn from(s: GroundingStatus) -> Self {
        match s {
            GroundingStatus::Succeeded => RowStatus::Succeeded,
            GroundingStatus::NoObjectDetected => RowStatus::NoObjectDetected,
            GroundingStatus::NoObjectSelected => RowStatus::NoObjectSelected,
            GroundingStatus::PartNotFound => RowStatus::PartNotFound,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Score {
    Value(f64),
    ZeroFilled,
}

impl Score {
    pub fn value(&self) -> f64 {
        match self {
            Score::Value(v) => *v,
            Score::ZeroFilled => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub sample_id: String,
    pub affordance: String,
    pub fscore: Score,
    pub status: RowStatus,
}

impl EvalRow {
    /// A row scored from a prediction, or zero-filled for any failure status.
    pub fn new(sample_id: &str, affordance: &str, status: RowStatus, fscore: Option<f64>) -> EvalRow {
        let fscore = match (status, fscore) {
            (RowStatus::Succeeded, Some(v)) => Score::Value(v),
            _ => Score::ZeroFilled,
        };
        EvalRow {
            sample_id: sample_id.to_string(),
            affordance: affordance.to_string(),
            fscore,
            status,
        }
    }

    pub fn is_consistent(&self) -> bool {
        matches!(self.fscore, Score::ZeroFilled) == (self.status != RowStatus::Succeeded)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    #[default]
    PerAffordanceMean,
    PerImageMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub mode: Aggregation,
    pub per_affordance: BTreeMap<String, f64>,
    pub average: f64,
    pub rows: usize,
    pub zero_filled: usize,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Zero-filled rows count as 0. Rows are grouped by key, so the result does
/// not depend on input order beyond floating-point summation within a group,
/// which follows `(sample_id, affordance)` order.
pub fn aggregate(rows: &[EvalRow], mode: Aggregation) -> AggregateReport {
    let mut sorted: Vec<&EvalRow> = rows.iter().collect();
    sorted.sort_by(|a, b| (&a.sample_id, &a.affordance).cmp(&(&b.sample_id, &b.affordance)));
    let mut by_aff: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut by_img: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in &sorted {
        by_aff.entry(r.affordance.clone()).or_default().push(r.fscore.value());
        by_img.entry(r.sample_id.clone()).or_default().push(r.fscore.value());
    }
    let per_affordance: BTreeMap<String, f64> = by_aff.iter().map(|(k, v)| (k.clone(), mean(v))).collect();
    let average = match mode {
        Aggregation::PerAffordanceMean => mean(&per_affordance.values().copied().collect::<Vec<_>>()),
        Aggregation::PerImageMean => mean(&by_img.values().map(|v| mean(v)).collect::<Vec<_>>()),
    };
    AggregateReport {
        mode,
        per_affordance,
        average,
        rows: rows.len(),
        zero_filled: rows.iter().filter(|r| r.fscore == Score::ZeroFilled).count(),
    }
}
