//! Shared domain types and pure mask utilities.
//!
//! Pixel coordinates follow `(u, v)` with `u` the column, `v` the row and the
//! origin at the top-left corner. Every buffer is row-major.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid dimensions {width}x{height}: both must be at least 1")]
    InvalidDimensions { width: usize, height: usize },
    #[error("buffer length {actual} does not match {expected} for a {width}x{height} image")]
    BufferLength {
        width: usize,
        height: usize,
        expected: usize,
        actual: usize,
    },
    #[error("shape mismatch: {left_w}x{left_h} vs {right_w}x{right_h}")]
    Shape {
        left_w: usize,
        left_h: usize,
        right_w: usize,
        right_h: usize,
    },
    #[error("mask has no foreground pixels")]
    EmptyMask,
    #[error("map has no positive mass")]
    EmptyDistribution,
    #[error("invalid value {value} at index {index}: {reason}")]
    InvalidValue {
        index: usize,
        value: f64,
        reason: &'static str,
    },
    #[error("invalid detection: {0}")]
    InvalidDetection(String),
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
}

fn check_dims(width: usize, height: usize) -> Result<(), ModelError> {
    if width == 0 || height == 0 {
        return Err(ModelError::InvalidDimensions { width, height });
    }
    Ok(())
}

fn check_len(width: usize, height: usize, per_pixel: usize, actual: usize) -> Result<(), ModelError> {
    let expected = width * height * per_pixel;
    if actual != expected {
        return Err(ModelError::BufferLength {
            width,
            height,
            expected,
            actual,
        });
    }
    Ok(())
}

/// 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, ModelError> {
        check_dims(width, height)?;
        check_len(width, height, 3, pixels.len())?;
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self, ModelError> {
        check_dims(width, height)?;
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, u: usize, v: usize) -> [u8; 3] {
        let i = (v * self.width + u) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, u: usize, v: usize, rgb: [u8; 3]) {
        let i = (v * self.width + u) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Depth in meters; `0.0` marks an invalid (no-return) pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    width: usize,
    height: usize,
    depth: Vec<f64>,
}

impl DepthImage {
    pub fn new(width: usize, height: usize, depth: Vec<f64>) -> Result<Self, ModelError> {
        check_dims(width, height)?;
        check_len(width, height, 1, depth.len())?;
        if let Some((index, &value)) = depth
            .iter()
            .enumerate()
            .find(|(_, d)| !d.is_finite() || **d < 0.0)
        {
            return Err(ModelError::InvalidValue {
                index,
                value,
                reason: "depth must be finite and non-negative",
            });
        }
        Ok(Self {
            width,
            height,
            depth,
        })
    }

    pub fn flat(width: usize, height: usize, meters: f64) -> Result<Self, ModelError> {
        Self::new(width, height, vec![meters; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.depth
    }

    /// Depth at `(u, v)`, `None` when the pixel holds no return.
    pub fn at(&self, u: usize, v: usize) -> Option<f64> {
        let d = self.depth[v * self.width + u];
        (d > 0.0).then_some(d)
    }
}

/// H×W boolean foreground grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self, ModelError> {
        check_dims(width, height)?;
        check_len(width, height, 1, bits.len())?;
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn empty(width: usize, height: usize) -> Result<Self, ModelError> {
        Self::new(width, height, vec![false; width * height])
    }

    pub fn full(width: usize, height: usize) -> Result<Self, ModelError> {
        Self::new(width, height, vec![true; width * height])
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self, ModelError> {
        check_dims(width, height)?;
        let mut bits = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                bits.push(f(u, v));
            }
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, u: usize, v: usize) -> bool {
        self.bits[v * self.width + u]
    }

    pub fn set(&mut self, u: usize, v: usize, value: bool) {
        self.bits[v * self.width + u] = value;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn same_shape(&self, other: &BinaryMask) -> Result<(), ModelError> {
        shape_check((self.width, self.height), (other.width, other.height))
    }

    /// Pixel-wise OR of two masks with equal dimensions.
    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask, ModelError> {
        self.same_shape(other)?;
        let bits = self
            .bits
            .iter()
            .zip(&other.bits)
            .map(|(a, b)| *a || *b)
            .collect();
        Ok(BinaryMask {
            width: self.width,
            height: self.height,
            bits,
        })
    }

    /// Foreground pixel coordinates in row-major order.
    pub fn foreground(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(move |(i, _)| (i % w, i / w))
    }

    /// Inclusive `(u_min, v_min, u_max, v_max)` of the foreground, if any.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        self.foreground().fold(None, |acc, (u, v)| match acc {
            None => Some((u, v, u, v)),
            Some((a, b, c, d)) => Some((a.min(u), b.min(v), c.max(u), d.max(v))),
        })
    }
}

pub(crate) fn shape_check(left: (usize, usize), right: (usize, usize)) -> Result<(), ModelError> {
    if left != right {
        return Err(ModelError::Shape {
            left_w: left.0,
            left_h: left.1,
            right_w: right.0,
            right_h: right.1,
        });
    }
    Ok(())
}

/// Row-major map of nonnegative reals. A distribution additionally sums to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self, ModelError> {
        check_dims(width, height)?;
        check_len(width, height, 1, values.len())?;
        if let Some((index, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, x)| !x.is_finite() || **x < 0.0)
        {
            return Err(ModelError::InvalidValue {
                index,
                value,
                reason: "saliency values must be finite and non-negative",
            });
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn from_mask(mask: &BinaryMask) -> Self {
        Self {
            width: mask.width,
            height: mask.height,
            values: mask.bits.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Pixels at or above `fraction × max` become fixations.
    pub fn threshold_relative(&self, fraction: f64) -> BinaryMask {
        let cut = fraction * self.max();
        BinaryMask {
            width: self.width,
            height: self.height,
            bits: self.values.iter().map(|x| *x > 0.0 && *x >= cut).collect(),
        }
    }
}

/// Input accepted by [`normalize_to_distribution`].
#[derive(Debug, Clone, Copy)]
pub enum DistributionSource<'a> {
    Mask(&'a BinaryMask),
    Map(&'a SaliencyMap),
}

impl<'a> From<&'a BinaryMask> for DistributionSource<'a> {
    fn from(m: &'a BinaryMask) -> Self {
        DistributionSource::Mask(m)
    }
}

impl<'a> From<&'a SaliencyMap> for DistributionSource<'a> {
    fn from(m: &'a SaliencyMap) -> Self {
        DistributionSource::Map(m)
    }
}

/// Rescale a mask or map so its values sum to one. A binary mask becomes a
/// uniform distribution of weight `1/area` over its foreground.
pub fn normalize_to_distribution<'a>(
    source: impl Into<DistributionSource<'a>>,
) -> Result<SaliencyMap, ModelError> {
    match source.into() {
        DistributionSource::Mask(mask) => {
            let area = mask.area();
            if area == 0 {
                return Err(ModelError::EmptyDistribution);
            }
            let w = 1.0 / area as f64;
            Ok(SaliencyMap {
                width: mask.width,
                height: mask.height,
                values: mask.bits.iter().map(|b| if *b { w } else { 0.0 }).collect(),
            })
        }
        DistributionSource::Map(map) => {
            let total = map.sum();
            if !(total > 0.0) {
                return Err(ModelError::EmptyDistribution);
            }
            Ok(SaliencyMap {
                width: map.width,
                height: map.height,
                values: map.values.iter().map(|x| x / total).collect(),
            })
        }
    }
}

/// Axis-aligned pixel box `(x_min, y_min, x_max, y_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(a: [f64; 4]) -> Self {
        BBox {
            x_min: a[0],
            y_min: a[1],
            x_max: a[2],
            y_max: a[3],
        }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: String,
    pub confidence: f64,
    pub bbox: BBox,
}

impl Detection {
    /// Checks the confidence range, box ordering, and that the box lies inside
    /// a `width × height` image.
    pub fn validate(&self, width: usize, height: usize) -> Result<(), ModelError> {
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(ModelError::InvalidDetection(format!(
                "confidence {} outside [0, 1] for {:?}",
                self.confidence, self.label
            )));
        }
        let b = &self.bbox;
        if !(b.x_min <= b.x_max && b.y_min <= b.y_max) {
            return Err(ModelError::InvalidDetection(format!(
                "unordered bbox {:?} for {:?}",
                <[f64; 4]>::from(*b),
                self.label
            )));
        }
        if b.x_min < 0.0 || b.y_min < 0.0 || b.x_max > width as f64 || b.y_max > height as f64 {
            return Err(ModelError::InvalidDetection(format!(
                "bbox {:?} outside {width}x{height} image for {:?}",
                <[f64; 4]>::from(*b),
                self.label
            )));
        }
        Ok(())
    }
}

/// Ordered affordance labels, each with the imperative task phrase fed to the
/// object prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffordanceVocabulary {
    pub affordances: Vec<String>,
    pub task_phrases: BTreeMap<String, String>,
}

impl AffordanceVocabulary {
    pub fn validate(&self) -> Result<(), ModelError> {
        let mut seen = std::collections::BTreeSet::new();
        for a in &self.affordances {
            if !seen.insert(a.as_str()) {
                return Err(ModelError::InvalidVocabulary(format!(
                    "duplicate affordance {a:?}"
                )));
            }
            if !self.task_phrases.contains_key(a) {
                return Err(ModelError::InvalidVocabulary(format!(
                    "affordance {a:?} has no task phrase"
                )));
            }
        }
        if let Some(extra) = self.task_phrases.keys().find(|k| !seen.contains(k.as_str())) {
            return Err(ModelError::InvalidVocabulary(format!(
                "task phrase for unknown affordance {extra:?}"
            )));
        }
        Ok(())
    }

    pub fn contains(&self, affordance: &str) -> bool {
        self.affordances.iter().any(|a| a == affordance)
    }

    pub fn task_phrase(&self, affordance: &str) -> Option<&str> {
        self.task_phrases.get(affordance).map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GroundingStatus {
    Succeeded,
    NoObjectDetected,
    NoObjectSelected,
    PartNotFound,
}

impl GroundingStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            GroundingStatus::Succeeded => "Succeeded",
            GroundingStatus::NoObjectDetected => "NoObjectDetected",
            GroundingStatus::NoObjectSelected => "NoObjectSelected",
            GroundingStatus::PartNotFound => "PartNotFound",
        }
    }
}

/// One backend exchange recorded by the pipeline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub stage: String,
    pub request: String,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundingResult {
    pub status: GroundingStatus,
    pub selected_object: Option<String>,
    pub part_names_tried: Vec<String>,
    pub mask: Option<BinaryMask>,
    pub trace: Vec<TraceRecord>,
}

impl GroundingResult {
    /// `Succeeded` holds exactly when a nonempty mask is present.
    pub fn is_consistent(&self) -> bool {
        let has_mask = self.mask.as_ref().is_some_and(|m| m.area() > 0);
        (self.status == GroundingStatus::Succeeded) == has_mask
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

pub fn confusion_counts(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts, ModelError> {
    pred.same_shape(gt)?;
    let mut c = ConfusionCounts::default();
    for (p, g) in pred.bits.iter().zip(&gt.bits) {
        match (*p, *g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Centroid and principal axes of a mask's foreground.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskAxes {
    pub centroid: (f64, f64),
    /// Radians in `[0, π)`, measured from +u toward +v.
    pub major_angle: f64,
    pub minor_angle: f64,
    /// `(λ1, λ2)` with `λ1 ≥ λ2`, eigenvalues of the second central moments.
    pub eigenvalues: (f64, f64),
    /// Set when `λ1 = λ2`; both angles then hold their default values.
    pub degenerate: bool,
}

const DEGENERACY_RTOL: f64 = 1e-9;

fn wrap_half_turn(angle: f64) -> f64 {
    let pi = std::f64::consts::PI;
    let a = angle.rem_euclid(pi);
    if a >= pi {
        0.0
    } else {
        a
    }
}

pub fn mask_centroid_and_axes(mask: &BinaryMask) -> Result<MaskAxes, ModelError> {
    let n = mask.area();
    if n == 0 {
        return Err(ModelError::EmptyMask);
    }
    let nf = n as f64;
    let (su, sv) = mask
        .foreground()
        .fold((0.0, 0.0), |(a, b), (u, v)| (a + u as f64, b + v as f64));
    let (cu, cv) = (su / nf, sv / nf);
    let (mut m20, mut m02, mut m11) = (0.0, 0.0, 0.0);
    for (u, v) in mask.foreground() {
        let du = u as f64 - cu;
        let dv = v as f64 - cv;
        m20 += du * du;
        m02 += dv * dv;
        m11 += du * dv;
    }
    m20 /= nf;
    m02 /= nf;
    m11 /= nf;

    let mean = 0.5 * (m20 + m02);
    let half_diff = 0.5 * (m20 - m02);
    let radius = (half_diff * half_diff + m11 * m11).sqrt();
    let (l1, l2) = (mean + radius, mean - radius);
    let degenerate = radius <= DEGENERACY_RTOL * mean.abs().max(f64::MIN_POSITIVE);
    let major = if degenerate {
        0.0
    } else {
        wrap_half_turn(0.5 * (2.0 * m11).atan2(m20 - m02))
    };
    let minor = wrap_half_turn(major + std::f64::consts::FRAC_PI_2);
    Ok(MaskAxes {
        centroid: (cu, cv),
        major_angle: major,
        minor_angle: minor,
        eigenvalues: (l1, l2.max(0.0)),
        degenerate,
    })
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    /// Rasterizes a `length × width` rectangle rotated by `angle` about `center`.
    pub fn rotated_rect(
        w: usize,
        h: usize,
        center: (f64, f64),
        length: f64,
        width: f64,
        angle: f64,
    ) -> BinaryMask {
        let (c, s) = (angle.cos(), angle.sin());
        BinaryMask::from_fn(w, h, |u, v| {
            let du = u as f64 - center.0;
            let dv = v as f64 - center.1;
            let along = du * c + dv * s;
            let across = -du * s + dv * c;
            along.abs() < length / 2.0 && across.abs() < width / 2.0
        })
        .unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::rotated_rect;
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn angle_diff(a: f64, b: f64) -> f64 {
        let d = (a - b).rem_euclid(PI);
        d.min(PI - d)
    }

    #[test]
    fn confusion_identity_and_complement() {
        let full = BinaryMask::full(2, 2).unwrap();
        let empty = BinaryMask::empty(2, 2).unwrap();
        let c = confusion_counts(&full, &full).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 4, fp: 0, fn_: 0, tn: 0 });
        let c = confusion_counts(&empty, &full).unwrap();
        assert_eq!((c.tp, c.fn_), (0, 4));
    }

    #[test]
    fn confusion_shape_mismatch() {
        let a = BinaryMask::empty(2, 2).unwrap();
        let b = BinaryMask::empty(3, 2).unwrap();
        assert!(matches!(confusion_counts(&a, &b), Err(ModelError::Shape { .. })));
    }

    #[test]
    fn constructors_validate() {
        assert!(BinaryMask::new(0, 3, vec![]).is_err());
        assert!(BinaryMask::new(2, 2, vec![true; 3]).is_err());
        assert!(RgbImage::new(2, 1, vec![0; 5]).is_err());
        assert!(DepthImage::new(1, 1, vec![-1.0]).is_err());
        assert!(SaliencyMap::new(1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn axis_aligned_rectangle() {
        let m = BinaryMask::from_fn(60, 30, |u, v| (10..50).contains(&u) && (10..20).contains(&v))
            .unwrap();
        let ax = mask_centroid_and_axes(&m).unwrap();
        assert_eq!(ax.major_angle, 0.0);
        assert!((ax.minor_angle - FRAC_PI_2).abs() < 1e-12);
        assert!((ax.centroid.0 - 29.5).abs() < 1e-12);
        assert!((ax.centroid.1 - 14.5).abs() < 1e-12);
        assert!(ax.eigenvalues.0 >= ax.eigenvalues.1);
        assert!(!ax.degenerate);
    }

    #[test]
    fn rotated_rectangle_thirty_degrees() {
        let angle = 30f64.to_radians();
        let m = rotated_rect(100, 100, (50.0, 50.0), 40.0, 10.0, angle);
        let ax = mask_centroid_and_axes(&m).unwrap();
        assert!(angle_diff(ax.major_angle, angle) < 2f64.to_radians());
    }

    #[test]
    fn two_point_line() {
        let mut m = BinaryMask::empty(6, 6).unwrap();
        m.set(0, 0, true);
        m.set(5, 5, true);
        let ax = mask_centroid_and_axes(&m).unwrap();
        assert!((ax.major_angle - PI / 4.0).abs() < 1e-12);
        assert!((ax.minor_angle - 3.0 * PI / 4.0).abs() < 1e-12);
    }

    #[test]
    fn empty_and_degenerate_masks() {
        let m = BinaryMask::empty(4, 4).unwrap();
        assert_eq!(mask_centroid_and_axes(&m), Err(ModelError::EmptyMask));
        let square = BinaryMask::from_fn(8, 8, |u, v| (2..6).contains(&u) && (2..6).contains(&v))
            .unwrap();
        let ax = mask_centroid_and_axes(&square).unwrap();
        assert!(ax.degenerate);
        assert_eq!(ax.major_angle, 0.0);
        let disk = BinaryMask::from_fn(21, 21, |u, v| {
            let (du, dv) = (u as f64 - 10.0, v as f64 - 10.0);
            du * du + dv * dv <= 64.0
        })
        .unwrap();
        assert!(mask_centroid_and_axes(&disk).unwrap().degenerate);
    }

    #[test]
    fn normalize_examples() {
        let m = BinaryMask::new(2, 2, vec![true, false, false, true]).unwrap();
        let d = normalize_to_distribution(&m).unwrap();
        assert_eq!(d.values(), &[0.5, 0.0, 0.0, 0.5]);
        let again = normalize_to_distribution(&d).unwrap();
        for (a, b) in again.values().iter().zip(d.values()) {
            assert!((a - b).abs() < 1e-12);
        }
        let zero = SaliencyMap::new(2, 1, vec![0.0, 0.0]).unwrap();
        assert_eq!(
            normalize_to_distribution(&zero),
            Err(ModelError::EmptyDistribution)
        );
        assert_eq!(
            normalize_to_distribution(&BinaryMask::empty(2, 2).unwrap()),
            Err(ModelError::EmptyDistribution)
        );
    }

    #[test]
    fn detection_validation() {
        let ok = Detection {
            label: "mug".into(),
            confidence: 0.91,
            bbox: [1.0, 2.0, 10.0, 12.0].into(),
        };
        assert!(ok.validate(20, 20).is_ok());
        let mut bad = ok.clone();
        bad.confidence = 1.2;
        assert!(bad.validate(20, 20).is_err());
        let mut bad = ok.clone();
        bad.bbox = [5.0, 2.0, 1.0, 12.0].into();
        assert!(bad.validate(20, 20).is_err());
        assert!(ok.validate(8, 8).is_err());
    }

    #[test]
    fn vocabulary_validation() {
        let mut v = AffordanceVocabulary {
            affordances: vec!["grasp".into(), "cut".into()],
            task_phrases: [("grasp", "grasp the object"), ("cut", "cut something")]
                .into_iter()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect(),
        };
        assert!(v.validate().is_ok());
        v.affordances.push("grasp".into());
        assert!(v.validate().is_err());
        v.affordances.pop();
        v.task_phrases.remove("cut");
        assert!(v.validate().is_err());
    }

    fn mask_strategy(w: usize, h: usize) -> impl Strategy<Value = BinaryMask> {
        proptest::collection::vec(any::<bool>(), w * h)
            .prop_map(move |bits| BinaryMask::new(w, h, bits).unwrap())
    }

    proptest! {
        #[test]
        fn confusion_swap_symmetry(a in mask_strategy(7, 5), b in mask_strategy(7, 5)) {
            let ab = confusion_counts(&a, &b).unwrap();
            let ba = confusion_counts(&b, &a).unwrap();
            prop_assert_eq!(ab.tp, ba.tp);
            prop_assert_eq!(ab.tn, ba.tn);
            prop_assert_eq!(ab.fp, ba.fn_);
            prop_assert_eq!(ab.fn_, ba.fp);
            prop_assert_eq!(ab.total(), 35);
        }

        #[test]
        fn major_angle_translation_invariant(
            angle_deg in 0.0f64..180.0,
            du in 0usize..10,
            dv in 0usize..10,
        ) {
            let angle = angle_deg.to_radians();
            let a = rotated_rect(80, 80, (30.0, 30.0), 30.0, 8.0, angle);
            let b = rotated_rect(80, 80, (30.0 + du as f64, 30.0 + dv as f64), 30.0, 8.0, angle);
            let shifted = BinaryMask::from_fn(80, 80, |u, v| {
                u >= du && v >= dv && a.get(u - du, v - dv)
            }).unwrap();
            prop_assert_eq!(&shifted, &b);
            let (x, y) = (
                mask_centroid_and_axes(&a).unwrap(),
                mask_centroid_and_axes(&shifted).unwrap(),
            );
            prop_assert!(angle_diff(x.major_angle, y.major_angle) < 1e-9);
        }

        #[test]
        fn quarter_turn_shifts_major_angle(angle_deg in 0.0f64..180.0) {
            let angle = angle_deg.to_radians();
            let a = rotated_rect(81, 81, (40.0, 40.0), 36.0, 8.0, angle);
            // Exact 90° pixel rotation about the center: (u, v) -> (80 - v, u).
            let r = BinaryMask::from_fn(81, 81, |u, v| a.get(v, 80 - u)).unwrap();
            let (x, y) = (
                mask_centroid_and_axes(&a).unwrap(),
                mask_centroid_and_axes(&r).unwrap(),
            );
            prop_assert!(angle_diff(y.major_angle, x.major_angle + FRAC_PI_2) < 2f64.to_radians());
        }

        #[test]
        fn normalize_idempotent_and_scale_invariant(
            values in proptest::collection::vec(0.0f64..10.0, 12),
            scale in 0.01f64..100.0,
        ) {
            prop_assume!(values.iter().sum::<f64>() > 1e-6);
            let m = SaliencyMap::new(4, 3, values.clone()).unwrap();
            let d = normalize_to_distribution(&m).unwrap();
            prop_assert!((d.sum() - 1.0).abs() < 1e-9);
            let dd = normalize_to_distribution(&d).unwrap();
            let scaled = SaliencyMap::new(4, 3, values.iter().map(|x| x * scale).collect()).unwrap();
            let ds = normalize_to_distribution(&scaled).unwrap();
            for i in 0..12 {
                prop_assert!((d.values()[i] - dd.values()[i]).abs() < 1e-12);
                prop_assert!((d.values()[i] - ds.values()[i]).abs() < 1e-12);
            }
        }
    }
}
