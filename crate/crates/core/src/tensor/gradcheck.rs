//! Central finite differences, the independent oracle for every backward rule.

use super::Tensor;
use crate::scalar::Scalar;

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every element `i` of `x`.
///
/// `f` receives non-tracking copies of `x` and must be deterministic.
pub fn finite_diff_grad<T, F>(f: F, x: &Tensor<T>, h: T) -> Tensor<T>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> T,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    let g = finite_diff_at(f, x, h, &all);
    Tensor::from_vec(x.shape().to_vec(), g).expect("same shape as x")
}

/// Central differences at the listed flat indices only.
pub fn finite_diff_at<T, F>(mut f: F, x: &Tensor<T>, h: T, indices: &[usize]) -> Vec<T>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> T,
{
    let base = x.data().to_vec();
    let two_h = h + h;
    indices
        .iter()
        .map(|&i| {
            let mut plus = base.clone();
            plus[i] += h;
            let mut minus = base.clone();
            minus[i] -= h;
            let fp = f(&x.with_data(plus).expect("shape").detach());
            let fm = f(&x.with_data(minus).expect("shape").detach());
            (fp - fm) / two_h
        })
        .collect()
}

/// Denominator floor for relative errors. Central differences at `h = 1e-5`
/// carry ~1e-11 of rounding noise for O(1) losses, so entries smaller than
/// this are compared at an absolute tolerance of `rtol · GRAD_FLOOR`.
pub const GRAD_FLOOR: f64 = 1e-4;

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest [`relative_error`] over paired entries.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| relative_error(x, y, floor))
        .fold(0.0, f64::max)
}
