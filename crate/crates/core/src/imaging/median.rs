use super::ImageVolume;

/// Sliding-window histogram over the full 16-bit range with a 256-bin
/// coarse level, tracking the running median incrementally.
struct WindowHistogram {
    fine: Vec<u32>,
    coarse: [u32; 256],
    /// Index of the median within the sorted window.
    rank: u32,
    median: usize,
    /// Number of window samples strictly below `median`.
    below: u32,
}

impl WindowHistogram {
    fn new(rank: u32) -> Self {
        WindowHistogram {
            fine: vec![0; 1 << 16],
            coarse: [0; 256],
            rank,
            median: 0,
            below: 0,
        }
    }

    fn add(&mut self, v: u16) {
        let v = usize::from(v);
        self.fine[v] += 1;
        self.coarse[v >> 8] += 1;
        if v < self.median {
            self.below += 1;
        }
    }

    fn remove(&mut self, v: u16) {
        let v = usize::from(v);
        self.fine[v] -= 1;
        self.coarse[v >> 8] -= 1;
        if v < self.median {
            self.below -= 1;
        }
    }

    fn median(&mut self) -> u16 {
        while self.below > self.rank {
            let mut b = self.median;
            loop {
                b -= 1;
                if self.coarse[b >> 8] == 0 {
                    b &= !0xFF;
                    continue;
                }
                if self.fine[b] > 0 {
                    break;
                }
            }
            self.median = b;
            self.below -= self.fine[b];
        }
        while self.below + self.fine[self.median] <= self.rank {
            self.below += self.fine[self.median];
            let mut b = self.median + 1;
            loop {
                if self.coarse[b >> 8] == 0 {
                    b = (b | 0xFF) + 1;
                    continue;
                }
                if self.fine[b] > 0 {
                    break;
                }
                b += 1;
            }
            self.median = b;
        }
        self.median as u16
    }
}

/// Square median filter of odd side `window`, replicating edge pixels.
pub fn median_filter(img: &ImageVolume, window: usize) -> Vec<u16> {
    assert!(window % 2 == 1, "median window must be odd");
    let (w, h) = (img.width(), img.height());
    let r = (window / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let px = img.pixels();
    let mut out = vec![0u16; w * h];
    let mut hist = WindowHistogram::new(((window * window) / 2) as u32);

    for y in 0..h {
        let rows: Vec<usize> = (-r..=r).map(|d| clamp(y as isize + d, h)).collect();
        for dx in -r..=r {
            let cx = clamp(dx, w);
            for &ry in &rows {
                hist.add(px[ry * w + cx]);
            }
        }
        out[y * w] = hist.median();
        for x in 1..w {
            let gone = clamp(x as isize - 1 - r, w);
            let come = clamp(x as isize + r, w);
            for &ry in &rows {
                hist.remove(px[ry * w + gone]);
                hist.add(px[ry * w + come]);
            }
            out[y * w + x] = hist.median();
        }
        let last = w as isize - 1;
        for dx in -r..=r {
            let cx = clamp(last + dx, w);
            for &ry in &rows {
                hist.remove(px[ry * w + cx]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(img: &ImageVolume, window: usize) -> Vec<u16> {
        let (w, h) = (img.width() as isize, img.height() as isize);
        let r = (window / 2) as isize;
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let mut vals = Vec::new();
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (cx, cy) = ((x + dx).clamp(0, w - 1), (y + dy).clamp(0, h - 1));
                        vals.push(img.get(cx as usize, cy as usize));
                    }
                }
                vals.sort_unstable();
                out.push(vals[vals.len() / 2]);
            }
        }
        out
    }

    #[test]
    fn matches_sorting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(window, spread) in &[(3usize, 10u16), (5, 45000), (7, 300), (15, 4000)] {
            let (w, h) = (rng.gen_range(16..40), rng.gen_range(16..40));
            let pixels = (0..w * h).map(|_| 20000 + rng.gen_range(0..spread)).collect();
            let img = ImageVolume::new(w, h, pixels, 0.1).unwrap();
            assert_eq!(median_filter(&img, window), brute(&img, window), "window {window}");
        }
    }

    #[test]
    fn extreme_values() {
        let pixels = (0..256)
            .map(|i| if i % 3 == 0 { 0 } else { u16::MAX })
            .collect();
        let img = ImageVolume::new(16, 16, pixels, 0.1).unwrap();
        assert_eq!(median_filter(&img, 5), brute(&img, 5));
    }
}
