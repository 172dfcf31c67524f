use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::tensor::{ParamSet, Tensor};

/// Adam with decoupled weight decay.
///
/// Decay is applied directly to the parameter before the moment update, so
/// its strength is independent of the gradient scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamState {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    fn ensure_buffers(&mut self, params: &ParamSet) {
        if self.m.is_empty() {
            self.m = (0..params.len()).map(|i| vec![0.0; params.at(i).1.len()]).collect();
            self.v = self.m.clone();
        }
    }
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState::new(2e-4, 1e-5)
    }
}

/// One optimizer step over every parameter in `params`, consuming gradients
/// aligned by parameter index (missing gradient = zero).
pub fn adam_step(
    params: &mut ParamSet,
    grads: &[Option<Tensor>],
    state: &mut AdamState,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(CoreError::invalid(format!(
            "adam_step: {} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    state.ensure_buffers(params);
    if state.m.len() != params.len() {
        return Err(CoreError::invalid("adam_step: optimizer state built for a different set"));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);

    for i in 0..params.len() {
        let p = params.at_mut(i);
        let n = p.len();
        if let Some(g) = &grads[i] {
            if g.shape() != p.shape() {
                return Err(CoreError::ShapeMismatch {
                    op: "adam_step",
                    lhs_rows: p.rows(),
                    lhs_cols: p.cols(),
                    rhs_rows: g.rows(),
                    rhs_cols: g.cols(),
                });
            }
        }
        let data = p.data_mut();
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        // Decoupled decay first, independent of the gradient.
        if state.weight_decay != 0.0 {
            let shrink = state.lr * state.weight_decay;
            for x in data.iter_mut() {
                *x -= shrink * *x;
            }
        }
        let Some(g) = &grads[i] else { continue };
        let gd = g.data();
        for j in 0..n {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * gd[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * gd[j] * gd[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            data[j] -= state.lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.add("w", Tensor::scalar(value)).unwrap();
        p
    }

    #[test]
    fn first_step_moves_by_lr_without_decay() {
        let mut params = one_param(1.0);
        let mut state = AdamState::new(2e-4, 0.0);
        let g = Some(Tensor::scalar(0.5));
        adam_step(&mut params, &[g], &mut state).unwrap();
        // bias-corrected m̂ = g, v̂ = g² so Δ = -lr·g/(|g|+eps) ≈ -lr
        let expected = 1.0 - 2e-4 * 0.5 / (0.5 + 1e-8);
        assert!((params.get("w").unwrap().item().unwrap() - expected).abs() < 1e-15);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_gradient_without_decay_leaves_params() {
        let mut params = one_param(3.0);
        let mut state = AdamState::new(2e-4, 0.0);
        adam_step(&mut params, &[Some(Tensor::scalar(0.0))], &mut state).unwrap();
        assert_eq!(params.get("w").unwrap().item().unwrap(), 3.0);
    }

    #[test]
    fn decay_only_step() {
        let mut params = one_param(2.0);
        let mut state = AdamState::new(2e-4, 1e-5);
        adam_step(&mut params, &[Some(Tensor::scalar(0.0))], &mut state).unwrap();
        let expected = 2.0 * (1.0 - 2e-4 * 1e-5);
        assert!((params.get("w").unwrap().item().unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut params = one_param(1.0);
        let mut state = AdamState::default();
        let bad = Some(Tensor::zeros(2, 1));
        assert!(adam_step(&mut params, &[bad], &mut state).is_err());
    }
}
