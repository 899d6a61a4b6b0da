use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `poly_lr`: `base_lr * (1 - iter / max_iter)^power`.
pub fn poly_lr(iter: usize, max_iter: usize, base_lr: f64, power: f64) -> Result<f64> {
    if iter > max_iter {
        return Err(Error::Contract(format!("iteration {iter} beyond max_iter {max_iter}")));
    }
    if max_iter == 0 {
        return Ok(base_lr);
    }
    Ok(base_lr * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

/// Hyper-parameters of momentum SGD with L2 weight decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

/// `sgd_step` for one tensor: `v <- momentum * v + (grad + wd * param)`,
/// `param <- param - lr * v`. Returns `(param, velocity)`.
pub fn sgd_step<T: Scalar>(
    param: &Tensor<T>,
    grad: &Tensor<T>,
    velocity: &Tensor<T>,
    lr: f64,
    cfg: SgdConfig,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if grad.shape() != param.shape() || velocity.shape() != param.shape() {
        return Err(Error::shape(format!(
            "sgd_step: param {}, grad {}, velocity {}",
            param.shape(),
            grad.shape(),
            velocity.shape()
        )));
    }
    let (lr, mu, wd) = (T::of(lr), T::of(cfg.momentum), T::of(cfg.weight_decay));
    let v: Vec<T> = param
        .data()
        .iter()
        .zip(grad.data())
        .zip(velocity.data())
        .map(|((&p, &g), &v)| mu * v + (g + wd * p))
        .collect();
    let p: Vec<T> = param.data().iter().zip(&v).map(|(&p, &v)| p - lr * v).collect();
    Ok((
        Tensor::from_vec(param.shape(), p)?,
        Tensor::from_vec(param.shape(), v)?,
    ))
}
