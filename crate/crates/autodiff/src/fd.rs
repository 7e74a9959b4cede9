use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Central-difference gradient `(f(x + h e_k) - f(x - h e_k)) / 2h` for every element `k`.
pub fn finite_difference_gradient<T, F>(mut f: F, x: &Tensor<T>, h: T) -> Tensor<T>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> T,
{
    let mut probe = x.clone();
    let mut out = x.zeros_like();
    let two_h = h + h;
    for k in 0..x.len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[k] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[k] = orig;
        out.data_mut()[k] = (plus - minus) / two_h;
    }
    out
}

/// Max elementwise `|a - b| / max(|a|, |b|, floor)`.
///
/// The floor keeps entries whose true gradient is essentially zero from dominating.
pub fn max_relative_error<T: Scalar>(analytic: &Tensor<T>, numeric: &Tensor<T>, floor: T) -> T {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(T::zero(), T::max)
}
