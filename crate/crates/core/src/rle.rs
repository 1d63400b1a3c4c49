//! Run-length codec for binary masks, shared by the wire protocol and the
//! dataset manifest.
//!
//! Counts are row-major and alternate background/foreground runs, starting
//! with the number of leading background pixels (which may be zero).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::BinaryMask;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RleError {
    #[error("run lengths sum to {sum}, expected {expected} for {width}x{height}")]
    SumMismatch {
        sum: i64,
        expected: i64,
        width: usize,
        height: usize,
    },
    #[error("negative run length {value} at position {index}")]
    NegativeCount { index: usize, value: i64 },
    #[error("invalid mask dimensions {width}x{height}")]
    Dimensions { width: usize, height: usize },
}

pub fn encode_rle(mask: &BinaryMask) -> Vec<u64> {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u64;
    for &bit in mask.bits() {
        if bit != current {
            counts.push(run);
            current = bit;
            run = 0;
        }
        run += 1;
    }
    counts.push(run);
    counts
}

/// Inverse of [`encode_rle`]. Counts are taken as signed so that malformed
/// payloads can be rejected with a precise error instead of failing to parse.
pub fn decode_rle(counts: &[i64], width: usize, height: usize) -> Result<BinaryMask, RleError> {
    if width == 0 || height == 0 {
        return Err(RleError::Dimensions { width, height });
    }
    if let Some((index, &value)) = counts.iter().enumerate().find(|(_, c)| **c < 0) {
        return Err(RleError::NegativeCount { index, value });
    }
    let expected = (width * height) as i64;
    let sum = counts
        .iter()
        .try_fold(0i64, |acc, c| acc.checked_add(*c))
        .unwrap_or(i64::MAX);
    if sum != expected {
        return Err(RleError::SumMismatch {
            sum,
            expected,
            width,
            height,
        });
    }
    let mut bits = Vec::with_capacity(width * height);
    let mut value = false;
    for &c in counts {
        bits.extend(std::iter::repeat_n(value, c as usize));
        value = !value;
    }
    Ok(BinaryMask::new(width, height, bits).expect("length checked above"))
}

/// JSON form `{"width":W,"height":H,"rle":[...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub width: usize,
    pub height: usize,
    pub rle: Vec<i64>,
}

impl RleMask {
    pub fn decode(&self) -> Result<BinaryMask, RleError> {
        decode_rle(&self.rle, self.width, self.height)
    }
}

impl From<&BinaryMask> for RleMask {
    fn from(mask: &BinaryMask) -> Self {
        RleMask {
            width: mask.width(),
            height: mask.height(),
            rle: encode_rle(mask).into_iter().map(|c| c as i64).collect(),
        }
    }
}
