use serde::{Deserialize, Serialize};

use super::net::{Grads, Model};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over the trainable blocks of one model. Frozen blocks are never
/// written.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    t: i32,
    m: Grads,
    v: Grads,
}

impl Adam {
    pub fn new(model: &Model, cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            t: 0,
            m: model.zero_grads(),
            v: model.zero_grads(),
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &Grads) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        let from = model.trainable_from();
        for (bi, block) in model.blocks_mut().iter_mut().enumerate().skip(from) {
            for (pi, param) in block.params.iter_mut().enumerate() {
                let (m, v, g) = (&mut self.m[bi][pi], &mut self.v[bi][pi], &grads[bi][pi]);
                for j in 0..param.data.len() {
                    m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                    v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                    let mh = m[j] / bc1;
                    let vh = v[j] / bc2;
                    param.data[j] -= c.lr * mh / (vh.sqrt() + c.eps);
                }
            }
        }
    }
}
