//! Deterministic reductions.
//!
//! Results computed in parallel are collected in index order and combined
//! with a fixed-shape pairwise tree, so the floating-point result depends only
//! on the number of terms, never on how work was scheduled.

/// Pairwise sum of `xs` with a fixed tree shape.
pub fn tree_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        n => {
            let mid = n / 2;
            tree_sum(&xs[..mid]) + tree_sum(&xs[mid..])
        }
    }
}

/// Pairwise mean; `0.0` on empty input.
pub fn tree_mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        tree_sum(xs) / xs.len() as f64
    }
}

/// Fold `items` with `merge` along the same pairwise tree as [`tree_sum`].
pub fn tree_reduce<T>(mut items: Vec<T>, merge: &impl Fn(T, T) -> T) -> Option<T> {
    match items.len() {
        0 => None,
        1 => items.pop(),
        n => {
            let right = items.split_off(n / 2);
            let l = tree_reduce(items, merge)?;
            let r = tree_reduce(right, merge)?;
            Some(merge(l, r))
        }
    }
}

/// Sample mean and standard error of the mean.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = tree_mean(xs);
    if n == 1 {
        return (mean, 0.0);
    }
    let sq: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = tree_sum(&sq) / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}
