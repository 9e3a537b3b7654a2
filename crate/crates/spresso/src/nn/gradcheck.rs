//! Central finite-difference gradient checking.

use crate::nn::tensor::Scalar;

/// Compare an analytic gradient against central differences of `f` at `x`.
/// Returns the maximum relative error (|a - n|) / (|a| + |n| + 1e-8).
pub fn grad_check<T: Scalar>(
    f: &mut dyn FnMut(&[T]) -> T,
    x: &[T],
    analytic: &[T],
    eps: f64,
) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut xs = x.to_vec();
    let h = T::from_f64(eps).unwrap();
    let mut worst = 0.0f64;
    for i in 0..xs.len() {
        let x0 = xs[i];
        xs[i] = x0 + h;
        let fp = f(&xs).to_f64().unwrap();
        xs[i] = x0 - h;
        let fm = f(&xs).to_f64().unwrap();
        xs[i] = x0;
        let num = (fp - fm) / (2.0 * eps);
        let ana = analytic[i].to_f64().unwrap();
        let rel = (ana - num).abs() / (ana.abs() + num.abs() + 1e-8);
        if rel > worst {
            worst = rel;
        }
    }
    worst
}
