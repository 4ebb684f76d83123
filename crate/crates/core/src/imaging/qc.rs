use serde::{Deserialize, Serialize};

use super::ImageVolume;

/// Acquisition quality-control statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QcReport {
    /// Arithmetic mean of all pixels, in counts.
    pub mean_brightness: f64,
    /// Population standard deviation of all pixels, in counts.
    pub contrast: f64,
}

/// Mean and population standard deviation.
///
/// Sums are accumulated exactly in integers (`Σv` in u64, `Σv²` in u128) and
/// converted to double precision once, so the result does not depend on
/// summation order.
pub fn qc_metrics(img: &ImageVolume) -> QcReport {
    let n = img.pixels().len() as u128;
    let (sum, sum_sq) = img.pixels().iter().fold((0u128, 0u128), |(s, q), &v| {
        let v = u128::from(v);
        (s + v, q + v * v)
    });
    // n²·σ² = n·Σv² − (Σv)², exact in u128 for any image that fits in memory.
    let scaled_var = n * sum_sq - sum * sum;
    let n = n as f64;
    QcReport {
        mean_brightness: sum as f64 / n,
        contrast: (scaled_var as f64).sqrt() / n,
    }
}
