use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Momentum-SGD state for one parameter.
///
/// The update convention is velocity accumulation:
///   v <- mu * v + g
///   p <- p - alpha * v
/// With mu = 0 this is exactly the plain SGD update p <- p - alpha * g.
#[derive(Clone, Debug)]
pub struct SgdState<T> {
    pub momentum: T,
    pub velocity: Vec<T>,
}

impl<T: Real> SgdState<T> {
    pub fn new(momentum: T, numel: usize) -> Result<SgdState<T>> {
        if momentum < T::zero() || momentum >= T::one() {
            return Err(Error::InvalidArg(format!(
                "momentum must be in [0,1), got {momentum}"
            )));
        }
        Ok(SgdState {
            momentum,
            velocity: vec![T::zero(); numel],
        })
    }
}

/// One SGD step in place. `grad` must match the parameter shape.
pub fn sgd_step<T: Real>(
    param: &mut Tensor<T>,
    grad: &[T],
    alpha: T,
    state: &mut SgdState<T>,
) -> Result<()> {
    if grad.len() != param.numel() {
        return Err(Error::Shape(format!(
            "sgd_step: grad has {} elements, param has {}",
            grad.len(),
            param.numel()
        )));
    }
    if alpha <= T::zero() {
        return Err(Error::InvalidArg(format!(
            "learning rate must be positive, got {alpha}"
        )));
    }
    if state.momentum == T::zero() {
        for (p, &g) in param.data_mut().iter_mut().zip(grad) {
            *p = *p - alpha * g;
        }
    } else {
        for ((p, v), &g) in param
            .data_mut()
            .iter_mut()
            .zip(&mut state.velocity)
            .zip(grad)
        {
            *v = state.momentum * *v + g;
            *p = *p - alpha * *v;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_update() {
        let mut p = Tensor::scalar(1.0f64);
        let mut st = SgdState::new(0.0, 1).unwrap();
        sgd_step(&mut p, &[2.0], 0.1, &mut st).unwrap();
        assert_eq!(p.data(), &[0.8]);
    }

    #[test]
    fn momentum_two_steps() {
        // First step: v = 2, p = 1 - 0.2 = 0.8.
        // Second step with same grad: v = 0.9*2 + 2 = 3.8, p = 0.8 - 0.38 = 0.42.
        let mut p = Tensor::scalar(1.0f64);
        let mut st = SgdState::new(0.9, 1).unwrap();
        sgd_step(&mut p, &[2.0], 0.1, &mut st).unwrap();
        assert!((p.data()[0] - 0.8).abs() < 1e-15);
        sgd_step(&mut p, &[2.0], 0.1, &mut st).unwrap();
        assert!((st.velocity[0] - 3.8).abs() < 1e-15);
        assert!((p.data()[0] - 0.42).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut p = Tensor::zeros(&[2]);
        let mut st = SgdState::<f64>::new(0.0, 2).unwrap();
        assert!(sgd_step(&mut p, &[1.0], 0.1, &mut st).is_err());
    }
}
