//! Order-stable reductions.
//!
//! Sums over particles use a fixed binary tree over the index range, so the
//! result depends only on the inputs and never on how work was scheduled.

const LEAF: usize = 16;

/// Pairwise sum of a slice.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= LEAF {
        return xs.iter().fold(0.0, |acc, &x| acc + x);
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Pairwise column sums of a row-major `rows x width` matrix.
pub fn pairwise_row_sum(data: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; width];
    if width == 0 {
        return out;
    }
    debug_assert_eq!(data.len() % width, 0);
    accumulate(data, width, &mut out);
    out
}

fn accumulate(data: &[f64], width: usize, out: &mut [f64]) {
    let rows = data.len() / width;
    if rows <= LEAF {
        out.iter_mut().for_each(|o| *o = 0.0);
        for row in data.chunks_exact(width) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        return;
    }
    let mid = rows / 2;
    let mut right = vec![0.0; width];
    accumulate(&data[..mid * width], width, out);
    accumulate(&data[mid * width..], width, &mut right);
    for (o, r) in out.iter_mut().zip(&right) {
        *o += r;
    }
}

/// Pairwise sum over `0..n` of per-index contributions of length `width`.
/// `contrib(i, acc)` must add the i-th term into `acc`. Subtrees run in
/// parallel but the tree shape, and so the result, is fixed.
pub fn pairwise_accumulate<F>(n: usize, width: usize, contrib: &F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    fn go<F: Fn(usize, &mut [f64]) + Sync>(lo: usize, hi: usize, width: usize, f: &F) -> Vec<f64> {
        if hi - lo <= LEAF {
            let mut acc = vec![0.0; width];
            for i in lo..hi {
                f(i, &mut acc);
            }
            return acc;
        }
        let mid = lo + (hi - lo) / 2;
        let (mut left, right) = rayon::join(|| go(lo, mid, width, f), || go(mid, hi, width, f));
        left.iter_mut().zip(&right).for_each(|(a, b)| *a += b);
        left
    }
    go(0, n, width, contrib)
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Sample mean and standard error of the mean.
pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(xs) / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Least-squares slope of `ys` against `xs`.
pub fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}
