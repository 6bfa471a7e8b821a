use std::collections::BTreeMap;

use super::TrainError;
use crate::autodiff::{ParamStore, Scalar};

/// Momentum buffers keyed by parameter name, plus the global step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState<S> {
    pub momentum: BTreeMap<String, Vec<S>>,
    pub step: usize,
}

/// `v <- m v + (g + wd p)`, `p <- p - lr v` for every trainable parameter,
/// using the gradients stored in `store`.
pub fn sgd_step<S: Scalar>(
    store: &mut ParamStore<S>,
    state: &mut OptimizerState<S>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<(), TrainError> {
    sgd_step_scaled(store, state, lr, momentum, weight_decay, |_| 1.0)
}

/// [`sgd_step`] with a per-parameter learning-rate multiplier.
pub fn sgd_step_scaled<S: Scalar>(
    store: &mut ParamStore<S>,
    state: &mut OptimizerState<S>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    lr_mult: impl Fn(&str) -> f64,
) -> Result<(), TrainError> {
    for p in store.iter().filter(|p| p.trainable) {
        if p.grad.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFiniteGrad(p.name.clone()));
        }
    }
    let (m, wd) = (S::of(momentum), S::of(weight_decay));
    for p in store.iter_mut().filter(|p| p.trainable) {
        let lr = S::of(lr * lr_mult(&p.name));
        let v = state
            .momentum
            .entry(p.name.clone())
            .or_insert_with(|| vec![S::zero(); p.grad.len()]);
        let w = p.value.data_mut();
        for ((vi, wi), &gi) in v.iter_mut().zip(w.iter_mut()).zip(&p.grad) {
            *vi = m * *vi + (gi + wd * *wi);
            *wi -= lr * *vi;
        }
    }
    state.step += 1;
    Ok(())
}

/// Scales all gradients so that their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<S: Scalar>(store: &mut ParamStore<S>, max_norm: f64) -> f64 {
    let sq: f64 = store
        .iter()
        .filter(|p| p.trainable)
        .map(|p| p.grad.iter().map(|g| g.as_f64() * g.as_f64()).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = S::of(max_norm / norm);
        for p in store.iter_mut().filter(|p| p.trainable) {
            p.grad.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}
