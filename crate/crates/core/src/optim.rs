//! Adam with decoupled weight decay.

use crate::config::TrainConfig;
use crate::error::{AmdError, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    }

    /// One update. `grads[i]` belongs to parameter `i`; `None` means no
    /// gradient reached it, which still applies weight decay.
    pub fn apply(&mut self, store: &mut ParamStore<F>, grads: &[Option<Tensor<F>>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(AmdError::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.shape() != store.tensors()[i].shape() {
                    return Err(AmdError::shape(format!(
                        "gradient {:?} does not match parameter `{}` {:?}",
                        g.shape(),
                        store.names()[i],
                        store.tensors()[i].shape()
                    )));
                }
                if !g.all_finite() {
                    return Err(AmdError::NonFiniteGradient(store.names()[i].clone()));
                }
            }
        }
        if self.m.is_empty() {
            self.m = store.tensors().iter().map(|t| vec![F::zero(); t.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let bc1 = F::one() - b1.powi(self.step as i32);
        let bc2 = F::one() - b2.powi(self.step as i32);
        let lr = F::of(self.lr);
        let decay = F::one() - lr * F::of(self.weight_decay);
        let eps = F::of(self.eps);
        for (i, param) in store.tensors_mut().iter_mut().enumerate() {
            let p = param.data_mut();
            if self.weight_decay != 0.0 {
                p.iter_mut().for_each(|w| *w *= decay);
            }
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, &gj) in g.data().iter().enumerate() {
                m[j] = b1 * m[j] + (F::one() - b1) * gj;
                v[j] = b2 * v[j] + (F::one() - b2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<F: Scalar>(grads: &mut [Option<Tensor<F>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|v| v.as_f64().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = F::of(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
