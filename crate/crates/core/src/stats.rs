//! Scalar summary statistics over plain slices.

use tsagent_autodiff::Scalar;

pub fn mean<T: Scalar>(xs: &[T]) -> T {
    if xs.is_empty() {
        return T::zero();
    }
    xs.iter().copied().fold(T::zero(), |a, b| a + b) / T::from_usize_lossy(xs.len())
}

/// Population variance.
pub fn variance<T: Scalar>(xs: &[T]) -> T {
    if xs.is_empty() {
        return T::zero();
    }
    let m = mean(xs);
    xs.iter().map(|&x| (x - m) * (x - m)).fold(T::zero(), |a, b| a + b) / T::from_usize_lossy(xs.len())
}

pub fn std<T: Scalar>(xs: &[T]) -> T {
    variance(xs).sqrt()
}

pub fn min<T: Scalar>(xs: &[T]) -> T {
    xs.iter().copied().fold(T::infinity(), T::min)
}

pub fn max<T: Scalar>(xs: &[T]) -> T {
    xs.iter().copied().fold(T::neg_infinity(), T::max)
}

fn sorted<T: Scalar>(xs: &[T]) -> Vec<T> {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    v
}

/// Quantile with linear interpolation between order statistics, `q ∈ [0, 1]`.
pub fn quantile<T: Scalar>(xs: &[T], q: f64) -> T {
    if xs.is_empty() {
        return T::zero();
    }
    let v = sorted(xs);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = T::lit(pos - lo as f64);
    v[lo] + (v[hi] - v[lo]) * frac
}

pub fn median<T: Scalar>(xs: &[T]) -> T {
    quantile(xs, 0.5)
}

pub fn iqr<T: Scalar>(xs: &[T]) -> T {
    quantile(xs, 0.75) - quantile(xs, 0.25)
}

/// Least-squares slope of `xs` against `t = 0..n-1`.
pub fn slope<T: Scalar>(xs: &[T]) -> T {
    slope_at(&(0..xs.len()).map(T::from_usize_lossy).collect::<Vec<_>>(), xs)
}

/// Least-squares slope of `ys` against arbitrary abscissae.
pub fn slope_at<T: Scalar>(ts: &[T], ys: &[T]) -> T {
    if ts.len() < 2 {
        return T::zero();
    }
    let (mt, my) = (mean(ts), mean(ys));
    let mut num = T::zero();
    let mut den = T::zero();
    for (&t, &y) in ts.iter().zip(ys) {
        num += (t - mt) * (y - my);
        den += (t - mt) * (t - mt);
    }
    if den == T::zero() {
        T::zero()
    } else {
        num / den
    }
}

/// Population covariance of two equal-length slices.
pub fn covariance<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    if n == 0 {
        return T::zero();
    }
    let (ma, mb) = (mean(&a[..n]), mean(&b[..n]));
    a.iter().zip(b).map(|(&x, &y)| (x - ma) * (y - mb)).fold(T::zero(), |s, v| s + v) / T::from_usize_lossy(n)
}

/// Centered moving average with replicate edge padding (odd `k`).
pub fn moving_average<T: Scalar>(xs: &[T], k: usize) -> Vec<T> {
    let n = xs.len();
    if n == 0 || k <= 1 {
        return xs.to_vec();
    }
    let half = k / 2;
    let at = |i: isize| xs[i.clamp(0, n as isize - 1) as usize];
    let kk = T::from_usize_lossy(k);
    (0..n as isize)
        .map(|t| (t - half as isize..=t + half as isize).map(at).fold(T::zero(), |a, b| a + b) / kk)
        .collect()
}
