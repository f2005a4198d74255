//! Adam optimizer with bias correction.

use crate::error::{shape_err, Result};
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct AdamState<T: Scalar> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    /// Defaults: β1=0.9, β2=0.999, ε=1e−8; lr supplied by the caller
    /// (training configs default to 1e−4).
    pub fn new(lr: T, param_shapes: &[Vec<usize>]) -> Self {
        AdamState {
            lr,
            beta1: T::from_f64_lossy(0.9),
            beta2: T::from_f64_lossy(0.999),
            eps: T::from_f64_lossy(1e-8),
            step: 0,
            m: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    /// One update over the full parameter list. Parameter order must match
    /// the order the state was created with.
    pub fn update(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(shape_err!(
                "adam: {} params / {} grads for state of {}",
                params.len(),
                grads.len(),
                self.m.len()
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        for i in 0..params.len() {
            if params[i].shape() != grads[i].shape() || params[i].shape() != self.m[i].shape() {
                return Err(shape_err!(
                    "adam: param {i} shape {:?} vs grad {:?} vs moment {:?}",
                    params[i].shape(),
                    grads[i].shape(),
                    self.m[i].shape()
                ));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let g = grads[i].data();
            let p = params[i].data_mut();
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (T::one() - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (T::one() - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
