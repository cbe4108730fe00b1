use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{ParamStore, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd { momentum: f64 },
}

/// Adam or SGD state for one [`ParamStore`] layout. Non-trainable
/// parameters are skipped.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub step: u64,
    /// First moment (Adam) or velocity (SGD), shaped like each parameter.
    pub first: Vec<Tensor<T>>,
    /// Second moment; empty for SGD.
    pub second: Vec<Tensor<T>>,
}

impl<T: Real> Optimizer<T> {
    pub fn adam(lr: f64, params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            kind: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            lr,
            weight_decay: 0.0,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn sgd(lr: f64, momentum: f64, weight_decay: f64, params: &ParamStore<T>) -> Self {
        Self {
            kind: OptimizerKind::Sgd { momentum },
            lr,
            weight_decay,
            step: 0,
            first: params
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape()))
                .collect(),
            second: Vec::new(),
        }
    }

    fn check_layout(&self, params: &ParamStore<T>) -> Result<()> {
        let ok = self.first.len() == params.len()
            && params
                .iter()
                .zip(&self.first)
                .all(|((_, p), m)| p.value.shape() == m.shape())
            && match self.kind {
                OptimizerKind::Adam { .. } => self.second.len() == params.len(),
                OptimizerKind::Sgd { .. } => true,
            };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(
                "optimizer state was not initialized for this parameter set".into(),
            ))
        }
    }

    /// Applies one update from the accumulated gradients.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        self.check_layout(params)?;
        self.step += 1;
        let lr = T::c(self.lr);
        let wd = T::c(self.weight_decay);
        match self.kind {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let (b1, b2, e) = (T::c(beta1), T::c(beta2), T::c(eps));
                let c1 = T::one() - T::c(beta1.powi(self.step as i32));
                let c2 = T::one() - T::c(beta2.powi(self.step as i32));
                for (i, (_, p)) in params.iter_mut().enumerate() {
                    if !p.trainable {
                        continue;
                    }
                    let m = self.first[i].data_mut();
                    let v = self.second[i].data_mut();
                    for j in 0..p.value.len() {
                        let w = p.value.data()[j];
                        let g = p.grad.data()[j] + wd * w;
                        m[j] = b1 * m[j] + (T::one() - b1) * g;
                        v[j] = b2 * v[j] + (T::one() - b2) * g * g;
                        let mhat = m[j] / c1;
                        let vhat = v[j] / c2;
                        p.value.data_mut()[j] = w - lr * mhat / (vhat.sqrt() + e);
                    }
                }
            }
            OptimizerKind::Sgd { momentum } => {
                let mu = T::c(momentum);
                for (i, (_, p)) in params.iter_mut().enumerate() {
                    if !p.trainable {
                        continue;
                    }
                    let vel = self.first[i].data_mut();
                    let (value, grad) = (p.value.data_mut(), p.grad.data());
                    for ((w, &g), v) in value.iter_mut().zip(grad).zip(vel.iter_mut()) {
                        let g = g + wd * *w;
                        let upd = if momentum > 0.0 {
                            *v = mu * *v + g;
                            *v
                        } else {
                            g
                        };
                        *w -= lr * upd;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Rescales trainable gradients so their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(params: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = params.grad_norm();
    if norm > max_norm && norm > 0.0 {
        let scale = T::c(max_norm / norm);
        for (_, p) in params.iter_mut() {
            if p.trainable {
                for g in p.grad.data_mut() {
                    *g *= scale;
                }
            }
        }
    }
    norm
}
