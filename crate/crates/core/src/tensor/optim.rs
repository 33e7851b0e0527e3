//! Momentum SGD with weight decay and the "poly" learning-rate schedule.

use indexmap::IndexMap;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub power: f64,
    pub max_iter: u64,
    pub iter: u64,
    velocity: IndexMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(base_lr: f64, max_iter: u64) -> Self {
        Self {
            base_lr,
            momentum: 0.9,
            weight_decay: 0.0005,
            power: 0.9,
            max_iter,
            iter: 0,
            velocity: IndexMap::new(),
        }
    }

    pub fn velocity(&self, name: &str) -> Option<&[f64]> {
        self.velocity.get(name).map(Vec::as_slice)
    }
}

/// `base_lr · (1 − iter / max_iter)^power`.
pub fn poly_lr(state: &OptimizerState) -> f64 {
    if state.max_iter == 0 {
        return state.base_lr;
    }
    let progress = (state.iter.min(state.max_iter)) as f64 / state.max_iter as f64;
    state.base_lr * (1.0 - progress).powf(state.power)
}

/// One momentum step over named parameters, using the current poly rate.
///
/// `v ← μ·v − lr·(g + λ·θ)`, `θ ← θ + v`. Parameters without a gradient entry
/// are left untouched. The iteration counter advances by one.
pub fn sgd_step(
    params: &mut IndexMap<String, Tensor>,
    grads: &IndexMap<String, Vec<f64>>,
    state: &mut OptimizerState,
) -> Result<()> {
    sgd_step_scaled(params, grads, state, |_| 1.0)
}

/// Like [`sgd_step`] with a per-parameter learning-rate multiplier.
pub fn sgd_step_scaled(
    params: &mut IndexMap<String, Tensor>,
    grads: &IndexMap<String, Vec<f64>>,
    state: &mut OptimizerState,
    lr_mult: impl Fn(&str) -> f64,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("gradient for unknown parameter {name}")))?;
        if p.len() != g.len() {
            return Err(Error::shape(format!(
                "gradient for {name} has {} values, parameter has {}",
                g.len(),
                p.len()
            )));
        }
        if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of {name} at index {pos} is {} (iteration {})",
                g[pos], state.iter
            )));
        }
    }
    let lr = poly_lr(state);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let rate = lr * lr_mult(name);
        let v = state
            .velocity
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        for ((theta, vel), &gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
            *vel = state.momentum * *vel - rate * (gv + state.weight_decay * *theta);
            *theta += *vel;
        }
    }
    state.iter = (state.iter + 1).min(state.max_iter);
    Ok(())
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping. A non-positive `max_norm` disables it.
pub fn clip_grad_norm(grads: &mut IndexMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let norm = grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        grads.values_mut().flatten().for_each(|g| *g *= scale);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> IndexMap<String, Tensor> {
        let mut m = IndexMap::new();
        m.insert("p".to_string(), Tensor::new(vec![1], vec![value]).unwrap());
        m
    }

    fn grad(value: f64) -> IndexMap<String, Vec<f64>> {
        let mut m = IndexMap::new();
        m.insert("p".to_string(), vec![value]);
        m
    }

    #[test]
    fn poly_schedule() {
        let mut s = OptimizerState::new(0.01, 100);
        assert_eq!(poly_lr(&s), 0.01);
        s.iter = 100;
        assert_eq!(poly_lr(&s), 0.0);
        s.iter = 50;
        let expected = 0.01 * 0.5f64.powf(0.9);
        assert!((poly_lr(&s) - expected).abs() < 1e-15);
        assert!((poly_lr(&s) / 0.01 - 0.5359).abs() < 1e-4);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = single(1.25);
        let mut s = OptimizerState::new(0.1, 10);
        s.weight_decay = 0.0;
        sgd_step(&mut p, &grad(0.0), &mut s).unwrap();
        assert_eq!(p["p"].data()[0], 1.25);
    }

    #[test]
    fn plain_gradient_step() {
        let mut p = single(5.0);
        let mut s = OptimizerState::new(1.0, 0);
        s.momentum = 0.0;
        s.weight_decay = 0.0;
        sgd_step(&mut p, &grad(2.0), &mut s).unwrap();
        assert_eq!(p["p"].data()[0], 3.0);
    }

    #[test]
    fn momentum_recurrence() {
        // v1 = -lr g, v2 = 0.9 v1 - lr g; constant lr via max_iter = 0.
        let mut p = single(0.0);
        let mut s = OptimizerState::new(0.1, 0);
        s.weight_decay = 0.0;
        sgd_step(&mut p, &grad(1.0), &mut s).unwrap();
        assert!((s.velocity("p").unwrap()[0] + 0.1).abs() < 1e-15);
        sgd_step(&mut p, &grad(1.0), &mut s).unwrap();
        assert!((s.velocity("p").unwrap()[0] + 0.19).abs() < 1e-15);
        assert!((p["p"].data()[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut p = single(1.0);
        let mut s = OptimizerState::new(0.1, 10);
        let err = sgd_step(&mut p, &grad(f64::NAN), &mut s).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(p["p"].data()[0], 1.0);
    }

    #[test]
    fn clipping_rescales_jointly() {
        let mut g = IndexMap::new();
        g.insert("a".to_string(), vec![3.0]);
        g.insert("b".to_string(), vec![4.0]);
        assert_eq!(clip_grad_norm(&mut g, 10.0), 5.0);
        assert_eq!(g["a"], vec![3.0]);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g["a"][0] - 0.6).abs() < 1e-15 && (g["b"][0] - 0.8).abs() < 1e-15);
        assert_eq!(clip_grad_norm(&mut g, 0.0), 1.0);
    }
}
