use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Central-difference estimate of the gradient of `f` at `x`.
///
/// Coordinate `k` of the result is `(f(x + eps·e_k) − f(x − eps·e_k)) / (2·eps)`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> f64,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Oracle(format!("eps must be positive, got {eps}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for k in 0..x.numel() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + eps;
        let hi = f(&probe);
        probe.data_mut()[k] = orig - eps;
        let lo = f(&probe);
        probe.data_mut()[k] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::Oracle(format!("non-finite objective at coordinate {k}")));
        }
        grad.push((hi - lo) / (2.0 * eps));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g = finite_diff_grad(|t| t.data()[0] * t.data()[0], &Tensor::scalar(3.0), 1e-4).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-7);
    }

    #[test]
    fn constant_gives_zero() {
        let x = Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 4.0]).unwrap();
        let g = finite_diff_grad(|_| 7.5, &x, 1e-4).unwrap();
        assert_eq!(g.data(), &[0.0; 4]);
        assert_eq!(g.shape(), &[2, 2]);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let r = finite_diff_grad(|t| (t.data()[0]).ln(), &Tensor::scalar(0.0), 1e-4);
        assert!(matches!(r, Err(Error::Oracle(_))));
    }

    #[test]
    fn rejects_bad_eps() {
        assert!(finite_diff_grad(|_| 0.0, &Tensor::scalar(1.0), 0.0).is_err());
    }
}
