//! Plain SGD on tensors whose gradient buffers have been populated.

use super::Tensor;
use crate::error::{Error, Result};

/// `p <- p - lr * grad(p)` for every parameter, then zero the gradients.
/// Every parameter must carry a gradient.
pub fn sgd_step<'a>(params: impl IntoIterator<Item = (&'a str, &'a mut Tensor)>, lr: f64) -> Result<()> {
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::Invalid { what: format!("learning rate {lr}") });
    }
    for (name, p) in params {
        let g = match p.grad() {
            Some(g) => g.to_vec(),
            None => return Err(Error::MissingGrad { name: name.to_string() }),
        };
        for (pi, gi) in p.data_mut().iter_mut().zip(&g) {
            *pi -= lr * gi;
        }
        if !p.all_finite() {
            return Err(Error::NonFinite { op: "sgd_step" });
        }
        p.zero_grad();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::tape::Tape;

    #[test]
    fn textbook_step() {
        let mut p = Tensor::new(vec![1], vec![1.0]).unwrap().with_requires_grad();
        p.accumulate_grad(&[2.0]).unwrap();
        sgd_step([("p", &mut p)], 0.5).unwrap();
        assert_eq!(p.data(), &[0.0]);
        assert!(p.grad().is_none());
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mut p = Tensor::new(vec![2], vec![3.0, -1.0]).unwrap().with_requires_grad();
        p.accumulate_grad(&[10.0, 10.0]).unwrap();
        sgd_step([("p", &mut p)], 0.0).unwrap();
        assert_eq!(p.data(), &[3.0, -1.0]);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = Tensor::zeros(vec![2]).with_requires_grad();
        let err = sgd_step([("p", &mut p)], 0.1).unwrap_err();
        assert!(matches!(err, Error::MissingGrad { .. }));
    }

    #[test]
    fn quadratic_bowl_converges() {
        // minimize mean((p - c)^2); closed-form minimizer is c.
        let target = Tensor::new(vec![3], vec![1.5, -2.0, 0.25]).unwrap();
        let mut p = Tensor::new(vec![3], vec![8.0, 3.0, -5.0]).unwrap().with_requires_grad();
        for _ in 0..100 {
            let mut tape = Tape::new();
            let pv = tape.param(&p);
            let tv = tape.constant(target.clone());
            let loss = tape.mse(pv, tv).unwrap();
            tape.backward(loss).unwrap();
            p.accumulate_grad(tape.grad(pv).unwrap()).unwrap();
            sgd_step([("p", &mut p)], 0.6).unwrap();
        }
        for (pi, ti) in p.data().iter().zip(target.data()) {
            assert!((pi - ti).abs() < 1e-6, "{pi} vs {ti}");
        }
    }
}
