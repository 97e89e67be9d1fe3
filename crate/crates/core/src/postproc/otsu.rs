//! Histogram Otsu thresholding with exact integer arithmetic.

/// Number of histogram bins.
pub const OTSU_BINS: usize = 256;

/// Histogram of the nonzero values of `map` over `[min_nonzero, max]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OtsuHistogram {
    pub lo: f32,
    pub hi: f32,
    pub counts: [u64; OTSU_BINS],
}

impl OtsuHistogram {
    /// `None` when `map` has fewer than two distinct nonzero values.
    pub fn new(map: &[f32]) -> Option<Self> {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in map.iter().filter(|&&v| v != 0.0) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if lo >= hi {
            return None;
        }
        let mut hist = Self {
            lo,
            hi,
            counts: [0; OTSU_BINS],
        };
        for &v in map.iter().filter(|&&v| v != 0.0) {
            hist.counts[hist.bin(v)] += 1;
        }
        Some(hist)
    }

    /// Bin index of `v`; the maximum lands in the last bin.
    pub fn bin(&self, v: f32) -> usize {
        let t = ((v as f64 - self.lo as f64) / (self.hi as f64 - self.lo as f64)) * OTSU_BINS as f64;
        (t.floor().max(0.0) as usize).min(OTSU_BINS - 1)
    }
}

/// `(n0·n1, (m0·n1 − m1·n0)²)` for a split; between-class variance is
/// proportional to `num / den` in bin-index units.
fn score(n0: u64, m0: u64, n1: u64, m1: u64) -> (u128, u128) {
    let diff = (m0 as i128 * n1 as i128 - m1 as i128 * n0 as i128).unsigned_abs();
    (n0 as u128 * n1 as u128, diff * diff)
}

/// Whether `a = num_a/den_a` is strictly greater than `b`.
fn greater((den_a, num_a): (u128, u128), (den_b, num_b): (u128, u128)) -> bool {
    match (num_a.checked_mul(den_b), num_b.checked_mul(den_a)) {
        (Some(l), Some(r)) => l > r,
        _ => num_a as f64 / den_a as f64 > num_b as f64 / den_b as f64,
    }
}

/// Bin index `k` maximising between-class variance when class 0 is bins
/// `0..=k` and class 1 the rest; the first maximum wins.
pub fn otsu_split(counts: &[u64; OTSU_BINS]) -> usize {
    let total_n: u64 = counts.iter().sum();
    let total_m: u64 = counts.iter().enumerate().map(|(i, &c)| i as u64 * c).sum();
    let (mut n0, mut m0) = (0u64, 0u64);
    let mut best_k = 0;
    let mut best: Option<(u128, u128)> = None;
    for (k, &c) in counts.iter().enumerate().take(OTSU_BINS - 1) {
        n0 += c;
        m0 += k as u64 * c;
        let n1 = total_n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let s = score(n0, m0, n1, total_m - m0);
        if best.is_none_or(|b| greater(s, b)) {
            best = Some(s);
            best_k = k;
        }
    }
    best_k
}

/// Binarise a nonnegative map: voxels whose histogram bin lies above the Otsu
/// split are true. With fewer than two distinct nonzero values every nonzero
/// voxel is true.
pub fn otsu_binarize_values(map: &[f32]) -> Vec<bool> {
    match OtsuHistogram::new(map) {
        None => map.iter().map(|&v| v != 0.0).collect(),
        Some(hist) => {
            let k = otsu_split(&hist.counts);
            map.iter().map(|&v| v != 0.0 && hist.bin(v) > k).collect()
        }
    }
}
