use serde::{Deserialize, Serialize};

use super::ImageVolume;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityResult {
    /// Fraction of in-breast pixels at or above the threshold.
    pub dense_fraction: f64,
    /// Smallest pixel value counted as dense.
    pub threshold_used: u16,
}

/// Otsu split of the non-zero (in-breast) histogram.
///
/// The lower class is `v ≤ t*` for the first `t*` maximising the between-class
/// variance; the reported threshold is `t* + 1` so that dense means `v ≥ threshold`.
/// A single-valued breast has no split: threshold is that value and the
/// fraction is 1.
pub fn breast_density(img: &ImageVolume) -> Result<DensityResult> {
    let total = img.pixels().len();
    let mut hist = vec![0u64; 1 << 16];
    let mut count = 0u64;
    let mut sum = 0f64;
    let (mut lo, mut hi) = (u16::MAX, 0u16);
    for &v in img.pixels().iter().filter(|&&v| v != 0) {
        hist[usize::from(v)] += 1;
        count += 1;
        sum += f64::from(v);
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if (count as f64) < 0.01 * total as f64 || count == 0 {
        return Err(Error::Degenerate(format!(
            "{count} of {total} pixels are in the breast region"
        )));
    }
    if lo == hi {
        return Ok(DensityResult {
            dense_fraction: 1.0,
            threshold_used: lo,
        });
    }

    let n = count as f64;
    let (mut w0, mut s0) = (0f64, 0f64);
    let mut best = (-1f64, lo);
    for t in lo..hi {
        let h = hist[usize::from(t)] as f64;
        if h == 0.0 {
            continue;
        }
        w0 += h;
        s0 += f64::from(t) * h;
        let w1 = n - w0;
        let diff = s0 / w0 - (sum - s0) / w1;
        let between = w0 * w1 * diff * diff;
        if between > best.0 {
            best = (between, t);
        }
    }
    let threshold = best.1 + 1;
    let dense: u64 = hist[usize::from(threshold)..].iter().sum();
    Ok(DensityResult {
        dense_fraction: dense as f64 / n,
        threshold_used: threshold,
    })
}
