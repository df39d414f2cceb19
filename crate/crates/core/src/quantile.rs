//! Magnitude thresholds for top-k selection.
//!
//! `exact_threshold` sorts every magnitude. `streaming_threshold` never holds
//! more than a fixed number of values: one pass for the range, one pass
//! filling a histogram over `log2|v|`, and one refinement pass restricted to
//! the bin that contains the k-th largest magnitude.

/// Anything that can replay its values in a fixed order, possibly many times.
pub trait ValueSource {
    fn for_each_chunk(&self, f: &mut dyn FnMut(&[f64]));
}

impl ValueSource for [f64] {
    fn for_each_chunk(&self, f: &mut dyn FnMut(&[f64])) {
        f(self)
    }
}

impl ValueSource for Vec<f64> {
    fn for_each_chunk(&self, f: &mut dyn FnMut(&[f64])) {
        f(self)
    }
}

pub const HISTOGRAM_BINS: usize = 1 << 16;
/// Threshold bins holding at most this many values are resolved exactly.
const REFINE_CAPACITY: u64 = 1 << 22;

/// Number of entries kept when retaining a fraction `p` of `total`:
/// `ceil(p * total)`, at least one. Products within 1e-9 (relative) of an
/// integer are treated as that integer so `0.3 * 10` keeps 3, not 4.
pub fn retained_count(p: f64, total: usize) -> usize {
    if total == 0 {
        return 0;
    }
    let exact = p * total as f64;
    let nearest = exact.round();
    let k = if (exact - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest
    } else {
        exact.ceil()
    };
    (k as usize).clamp(1, total)
}

/// k-th largest magnitude (1-based). `k` must be in `1..=len`.
pub fn exact_threshold(source: &dyn ValueSource, k: usize) -> f64 {
    let mut magnitudes = Vec::new();
    source.for_each_chunk(&mut |chunk| magnitudes.extend(chunk.iter().map(|v| v.abs())));
    assert!(k >= 1 && k <= magnitudes.len(), "k out of range");
    let (_, kth, _) = magnitudes.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
    *kth
}

/// Approximates the k-th largest magnitude in bounded memory. The result is
/// exact unless the threshold bin holds more than a few million values, in
/// which case it is the smallest value of the sub-bin where the count
/// crosses `k`.
pub fn streaming_threshold(source: &dyn ValueSource, k: usize) -> f64 {
    let mut total = 0u64;
    let mut nonzero = 0u64;
    let mut min_pos = f64::INFINITY;
    let mut max_pos = 0.0f64;
    source.for_each_chunk(&mut |chunk| {
        total += chunk.len() as u64;
        for &v in chunk {
            let a = v.abs();
            if a > 0.0 {
                nonzero += 1;
                min_pos = min_pos.min(a);
                max_pos = max_pos.max(a);
            }
        }
    });
    let k = k as u64;
    assert!(k >= 1 && k <= total, "k out of range");
    if k > nonzero {
        return 0.0;
    }
    if min_pos == max_pos {
        return min_pos;
    }

    let coarse = LogBins::new(min_pos.log2(), max_pos.log2());
    let mut counts = vec![0u64; HISTOGRAM_BINS];
    source.for_each_chunk(&mut |chunk| {
        for &v in chunk {
            let a = v.abs();
            if a > 0.0 {
                counts[coarse.bin(a)] += 1;
            }
        }
    });
    let (bin, need) = crossing_bin(&counts, k);

    if counts[bin] <= REFINE_CAPACITY {
        let mut members = Vec::with_capacity(counts[bin] as usize);
        source.for_each_chunk(&mut |chunk| {
            members.extend(
                chunk
                    .iter()
                    .map(|v| v.abs())
                    .filter(|&a| a > 0.0 && coarse.bin(a) == bin),
            );
        });
        return exact_threshold(&members, need as usize);
    }

    let (lo, hi) = coarse.edges(bin);
    let fine = LogBins::new(lo, hi);
    let mut fine_counts = vec![0u64; HISTOGRAM_BINS];
    let mut fine_min = vec![f64::INFINITY; HISTOGRAM_BINS];
    source.for_each_chunk(&mut |chunk| {
        for &v in chunk {
            let a = v.abs();
            if a > 0.0 && coarse.bin(a) == bin {
                let b = fine.bin(a);
                fine_counts[b] += 1;
                fine_min[b] = fine_min[b].min(a);
            }
        }
    });
    let (fine_bin, _) = crossing_bin(&fine_counts, need);
    fine_min[fine_bin]
}

/// Bin index (scanning from the top) where the cumulative count reaches `k`,
/// and how many entries are still needed from inside that bin.
fn crossing_bin(counts: &[u64], k: u64) -> (usize, u64) {
    let mut above = 0u64;
    for (bin, &c) in counts.iter().enumerate().rev() {
        if above + c >= k {
            return (bin, k - above);
        }
        above += c;
    }
    unreachable!("histogram holds fewer than k values")
}

#[derive(Debug, Clone, Copy)]
struct LogBins {
    lo: f64,
    width: f64,
}

impl LogBins {
    fn new(lo: f64, hi: f64) -> Self {
        let width = ((hi - lo) / HISTOGRAM_BINS as f64).max(f64::MIN_POSITIVE);
        Self { lo, width }
    }

    fn bin(&self, magnitude: f64) -> usize {
        let idx = ((magnitude.log2() - self.lo) / self.width).floor();
        if idx <= 0.0 {
            0
        } else {
            (idx as usize).min(HISTOGRAM_BINS - 1)
        }
    }

    fn edges(&self, bin: usize) -> (f64, f64) {
        let lo = self.lo + bin as f64 * self.width;
        (lo, lo + self.width)
    }
}
