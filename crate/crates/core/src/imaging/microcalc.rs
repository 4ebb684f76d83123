use serde::{Deserialize, Serialize};

use super::{median_filter, ImageVolume};
use crate::{Error, Result};

/// Robust standard deviation from the median absolute deviation.
const MAD_TO_SIGMA: f64 = 1.4826;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    pub min_snr: f64,
    pub window: usize,
}

impl Default for DetectorParams {
    fn default() -> Self {
        DetectorParams {
            min_snr: 5.0,
            window: 15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicrocalcResult {
    pub count: usize,
    pub locations: Vec<Location>,
}

/// Median top-hat detector.
///
/// The residual `r = img − median(img, window)` is thresholded at
/// `min_snr · 1.4826 · MAD(r)`; the MAD is taken over in-breast (non-zero)
/// pixels so a large empty background cannot collapse the noise estimate.
/// Candidates are grouped with 8-connectivity and components of area
/// `1..=window²/2` become detections at their residual-weighted centroid.
///
/// The area gate is applied to the whole bright structure a component
/// belongs to. A plane fitted to a ring of pixels around the component gives
/// the local background level, and the component is grown through pixels
/// exceeding that level by more than the cut; structures wider than the
/// window (masses, the skin line) then fail the gate instead of leaving
/// small residual fragments along their rim. Components touching the
/// zero-valued background are rejected. Detections are ordered by `(y, x)`.
pub fn detect_microcalcs(img: &ImageVolume, min_snr: f64, window: usize) -> Result<MicrocalcResult> {
    if window < 3 || window.is_multiple_of(2) {
        return Err(Error::malformed(format!("window {window} must be odd and >= 3")));
    }
    if !(min_snr.is_finite() && min_snr > 0.0) {
        return Err(Error::malformed(format!("min_snr {min_snr} must be positive")));
    }
    let (w, h) = (img.width(), img.height());
    let px = img.pixels();
    let background = median_filter(img, window);
    let residual: Vec<i32> = px
        .iter()
        .zip(&background)
        .map(|(&v, &m)| i32::from(v) - i32::from(m))
        .collect();

    let mut support: Vec<i32> = residual
        .iter()
        .zip(px)
        .filter(|(_, &v)| v != 0)
        .map(|(&r, _)| r)
        .collect();
    if support.is_empty() {
        return Ok(MicrocalcResult {
            count: 0,
            locations: Vec::new(),
        });
    }
    let centre = lower_median(&mut support);
    let mut deviations: Vec<i32> = support.iter().map(|r| (r - centre).abs()).collect();
    let sigma = MAD_TO_SIGMA * f64::from(lower_median(&mut deviations));
    let cut = min_snr * sigma;

    let candidate: Vec<bool> = residual
        .iter()
        .zip(px)
        .map(|(&r, &v)| v != 0 && f64::from(r) > cut)
        .collect();
    let max_area = window * window / 2;
    let mut seen = vec![false; w * h];
    let mut locations = Vec::new();
    let mut stack = Vec::new();
    let mut member = Vec::new();
    for start in 0..w * h {
        if !candidate[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut area, mut wsum, mut xsum, mut ysum) = (0usize, 0f64, 0f64, 0f64);
        member.clear();
        while let Some(i) = stack.pop() {
            member.push(i);
            let (x, y) = (i % w, i / w);
            let weight = f64::from(residual[i]);
            area += 1;
            wsum += weight;
            xsum += weight * x as f64;
            ysum += weight * y as f64;
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let j = ny * w + nx;
                    if candidate[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        if (1..=max_area).contains(&area)
            && structure_fits(img, &member, cut, max_area)
        {
            locations.push(Location {
                x: xsum / wsum,
                y: ysum / wsum,
            });
        }
    }
    locations.sort_by(|a, b| a.y.total_cmp(&b.y).then(a.x.total_cmp(&b.x)));
    Ok(MicrocalcResult {
        count: locations.len(),
        locations,
    })
}

/// Local background around a component: a least-squares plane through a
/// square ring `RING_GAP..=RING_OUTER` pixels outside its bounding box.
/// `None` when the neighbourhood reaches the zero background, where no
/// tissue background can be estimated.
struct Plane {
    cx: f64,
    cy: f64,
    level: f64,
    gx: f64,
    gy: f64,
}

const RING_GAP: usize = 2;
const RING_OUTER: usize = 4;

impl Plane {
    fn fit(img: &ImageVolume, member: &[usize]) -> Option<Plane> {
        let (w, h) = (img.width(), img.height());
        let px = img.pixels();
        let (mut x0, mut x1, mut y0, mut y1) = (usize::MAX, 0, usize::MAX, 0);
        for &i in member {
            let (x, y) = (i % w, i / w);
            (x0, x1, y0, y1) = (x0.min(x), x1.max(x), y0.min(y), y1.max(y));
        }
        let inner = |x: usize, y: usize| {
            x + RING_GAP > x0 && x < x1 + RING_GAP && y + RING_GAP > y0 && y < y1 + RING_GAP
        };
        let mut pts = Vec::new();
        for y in y0.saturating_sub(RING_OUTER)..=(y1 + RING_OUTER).min(h - 1) {
            for x in x0.saturating_sub(RING_OUTER)..=(x1 + RING_OUTER).min(w - 1) {
                let v = px[y * w + x];
                if v == 0 {
                    return None;
                }
                if !inner(x, y) {
                    pts.push((x as f64, y as f64, f64::from(v)));
                }
            }
        }
        if pts.len() < 6 {
            return None;
        }
        let n = pts.len() as f64;
        let cx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let cy = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let level = pts.iter().map(|p| p.2).sum::<f64>() / n;
        let (mut sxx, mut syy, mut sxy, mut sxv, mut syv) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for &(x, y, v) in &pts {
            let (dx, dy, dv) = (x - cx, y - cy, v - level);
            sxx += dx * dx;
            syy += dy * dy;
            sxy += dx * dy;
            sxv += dx * dv;
            syv += dy * dv;
        }
        let det = sxx * syy - sxy * sxy;
        let (gx, gy) = if det.abs() > 1e-9 * (sxx * syy).max(1.0) {
            ((sxv * syy - syv * sxy) / det, (syv * sxx - sxv * sxy) / det)
        } else {
            (0.0, 0.0)
        };
        Some(Plane { cx, cy, level, gx, gy })
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        self.level + self.gx * (x - self.cx) + self.gy * (y - self.cy)
    }
}

/// True when the component stands out from its local background (the ring
/// plane evaluated at the component) by more than `cut` and the region
/// grown from it through pixels above that level stays within `max_area`.
fn structure_fits(img: &ImageVolume, member: &[usize], cut: f64, max_area: usize) -> bool {
    let Some(plane) = Plane::fit(img, member) else {
        return false;
    };
    let (w, h) = (img.width(), img.height());
    let px = img.pixels();
    let n = member.len() as f64;
    let mx = member.iter().map(|&i| (i % w) as f64).sum::<f64>() / n;
    let my = member.iter().map(|&i| (i / w) as f64).sum::<f64>() / n;
    let level = plane.at(mx, my);
    let bright = |i: usize| px[i] != 0 && f64::from(px[i]) - level > cut;
    let mut stack: Vec<usize> = member.iter().copied().filter(|&i| bright(i)).collect();
    if stack.is_empty() {
        return false;
    }
    let mut visited: std::collections::HashSet<usize> = stack.iter().copied().collect();
    while let Some(i) = stack.pop() {
        let (x, y) = (i % w, i / w);
        for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
            for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                let j = ny * w + nx;
                if bright(j) && visited.insert(j) {
                    if visited.len() > max_area {
                        return false;
                    }
                    stack.push(j);
                }
            }
        }
    }
    true
}

fn lower_median(values: &mut [i32]) -> i32 {
    let mid = (values.len() - 1) / 2;
    *values.select_nth_unstable(mid).1
}
