//! Mini-batch SGD with classical momentum and a step-decay schedule.

use indexmap::IndexMap;

use crate::error::{Result, TensorError};
use crate::tensor::{Scalar, Tensor};

/// Velocity buffers keyed by parameter name.
pub type Velocity<T> = IndexMap<String, Tensor<T>>;

/// One momentum step over every trainable tensor:
///
/// ```text
/// v <- momentum * v + grad
/// p <- p - lr * v
/// ```
///
/// `grads` is drained, so gradients never leak into the next step. Missing
/// velocity buffers start at zero.
pub fn sgd_momentum_step<'a, T: Scalar>(
    params: impl IntoIterator<Item = (&'a str, &'a mut Tensor<T>)>,
    grads: &mut IndexMap<String, Tensor<T>>,
    velocity: &mut Velocity<T>,
    lr: T,
    momentum: T,
) -> Result<()> {
    let params: Vec<(&str, &mut Tensor<T>)> = params.into_iter().collect();
    if let Some((name, _)) = params.iter().find(|(name, _)| !grads.contains_key(*name)) {
        return Err(TensorError::MissingGradient {
            name: (*name).to_string(),
        });
    }
    for (name, param) in params {
        let grad = grads.shift_remove(name).expect("checked above");
        if grad.shape() != param.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "sgd_momentum_step",
                lhs: param.shape(),
                rhs: grad.shape(),
            });
        }
        let v = velocity
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        for ((p, vi), &g) in param.data_mut().iter_mut().zip(v.data_mut()).zip(grad.data()) {
            *vi = momentum * *vi + g;
            *p -= lr * *vi;
        }
    }
    grads.clear();
    Ok(())
}

/// Step decay: `lr0 / factor^floor(epoch / every)`.
pub fn step_decay(lr0: f64, factor: f64, every: usize, epoch: usize) -> f64 {
    let steps = (epoch / every.max(1)) as i32;
    lr0 / factor.powi(steps)
}
