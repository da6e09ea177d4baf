//! Central finite differences, used as the oracle for analytic gradients.

use crate::tensor::Tensor;

/// Numerical gradient of `f` with respect to every element of every tensor
/// in `params`.
pub fn numeric_gradient(
    params: &[Tensor],
    eps: f64,
    mut f: impl FnMut(&[Tensor]) -> f64,
) -> Vec<Tensor> {
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let mut g = Tensor::zeros(params[i].shape());
        for k in 0..params[i].len() {
            let orig = work[i].data()[k];
            work[i].data_mut()[k] = orig + eps;
            let up = f(&work);
            work[i].data_mut()[k] = orig - eps;
            let down = f(&work);
            work[i].data_mut()[k] = orig;
            g.data_mut()[k] = (up - down) / (2.0 * eps);
        }
        out.push(g);
    }
    out
}

/// Largest violation of `|a - n| <= max(rel * max(|a|, |n|), abs)` across all
/// elements, expressed as the ratio error/allowed (<= 1 passes).
pub fn worst_ratio(analytic: &[Tensor], numeric: &[Tensor], rel: f64, abs: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        assert_eq!(a.shape(), n.shape());
        for (&x, &y) in a.data().iter().zip(n.data()) {
            let allowed = (rel * x.abs().max(y.abs())).max(abs);
            worst = worst.max((x - y).abs() / allowed);
        }
    }
    worst
}
