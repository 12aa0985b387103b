use super::{Gradients, ParamStore, Tensor};
use crate::error::{config_err, shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction and no weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let m = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Self {
            config,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    /// Applies one update. Parameters without a gradient are treated as
    /// having a zero gradient, so their moments still decay.
    pub fn update(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f32) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(shape_err!(
                "optimizer tracks {} tensors, model has {}",
                self.m.len(),
                params.len()
            ));
        }
        for id in params.ids() {
            if self.m[id.0].shape() != params.get(id).shape() {
                return Err(shape_err!(
                    "moment shape {:?} does not match parameter {} {:?}",
                    self.m[id.0].shape(),
                    params.name(id),
                    params.get(id).shape()
                ));
            }
            if let Some(g) = grads.get(id) {
                if g.len() != params.get(id).len() {
                    return Err(shape_err!("gradient length mismatch for {}", params.name(id)));
                }
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for id in params.ids() {
            let g = grads.get(id);
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup to `peak` over `warmup` steps, then `peak * sqrt(warmup / step)`.
pub fn lr_inverse_sqrt(step: u64, warmup: u64, peak: f32) -> Result<f32> {
    if warmup == 0 {
        return Err(config_err!("warmup must be positive"));
    }
    if step == 0 {
        return Err(config_err!("learning-rate steps start at 1"));
    }
    if step <= warmup {
        Ok(peak * step as f32 / warmup as f32)
    } else {
        Ok(peak * (warmup as f32 / step as f32).sqrt())
    }
}
