//! Finite-difference gradient verification.

use alloc::vec;
use alloc::vec::Vec;

use super::Tensor;
use crate::math::F64Ext;

/// Compare reverse-mode gradients of a scalar-valued function against central
/// finite differences.
///
/// `f` must rebuild its graph from the current contents of `params` on every
/// call. Returns the worst relative error over all coordinates,
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64) -> f64
where
    F: Fn() -> Tensor,
{
    for p in params {
        p.zero_grad();
    }
    let loss = f();
    loss.backward();
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();
    for p in params {
        p.zero_grad();
    }

    let mut worst = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        let base = p.to_vec();
        let mut probe = base.clone();
        for i in 0..base.len() {
            probe[i] = base[i] + h;
            p.set_data(&probe);
            let fp = f().item();
            probe[i] = base[i] - h;
            p.set_data(&probe);
            let fm = f().item();
            probe[i] = base[i];
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[pi][i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        p.set_data(&base);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_near_exact() {
        let x = Tensor::param(&[4], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let err = grad_check(|| x.mul(&x).unwrap().sum_all(), &[x.clone()], 1e-5);
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = grad_check(|| Tensor::scalar(5.0).sum_all(), &[x.clone()], 1e-5);
        assert_eq!(err, 0.0);
    }

    #[test]
    fn matmul_grad_matches_ones_bt() {
        // d sum(A x B) / dA = ones x B^T
        let mut rng = crate::Rng::new(5);
        let a = Tensor::param(&[3, 4], rng.normal_vec(12)).unwrap();
        let b = Tensor::new(&[4, 2], rng.normal_vec(8)).unwrap();
        let err = grad_check(|| a.matmul(&b).unwrap().sum_all(), &[a.clone()], 1e-5);
        assert!(err < 1e-6, "relative error {err}");

        a.zero_grad();
        a.matmul(&b).unwrap().sum_all().backward();
        let grad = a.grad().unwrap();
        b.with_data(|bd| {
            for i in 0..3 {
                for k in 0..4 {
                    let expect: f64 = (0..2).map(|j| bd[k * 2 + j]).sum();
                    assert!((grad[i * 4 + k] - expect).abs() < 1e-12);
                }
            }
        });
    }
}
