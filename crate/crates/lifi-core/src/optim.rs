//! Adam with decoupled weight decay.
//!
//! Decay is applied directly to the parameters (not through the gradient) and
//! only to matrices; vectors such as layernorm gains, biases, and gate
//! temperatures are left undecayed.

use crate::scalar::Scalar;
use crate::tensor::ParamTensor;

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update. `grads[i]` pairs with `params[i]`; `None` entries (frozen
    /// or unreached parameters) are skipped. `grad_scale` is multiplied into
    /// every gradient first, which is how global-norm clipping is applied.
    pub fn step<S: Scalar>(
        &mut self,
        params: &mut [&mut ParamTensor<S>],
        grads: &[Option<&[S]>],
        grad_scale: f64,
    ) {
        assert_eq!(params.len(), grads.len(), "params/grads length mismatch");
        if self.m.len() < params.len() {
            self.m.resize(params.len(), Vec::new());
            self.v.resize(params.len(), Vec::new());
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);

        for (idx, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
            let Some(grad) = grad else { continue };
            let n = param.data.len();
            if self.m[idx].is_empty() {
                self.m[idx] = vec![0.0; n];
                self.v[idx] = vec![0.0; n];
            }
            let decay = if param.shape.len() >= 2 {
                self.weight_decay
            } else {
                0.0
            };
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..n {
                let g = grad[i].to_f64() * grad_scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let mut p = param.data[i].to_f64();
                p -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + decay * p);
                param.data[i] = S::from_f64(p);
            }
        }
    }
}

/// Scale factor that caps the global gradient norm at `max_norm`.
pub fn grad_clip_scale<S: Scalar>(grads: &[Option<&[S]>], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for grad in grads.iter().flatten() {
        for g in grad.iter() {
            let g = g.to_f64();
            sq += g * g;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        max_norm / norm
    } else {
        1.0
    }
}
