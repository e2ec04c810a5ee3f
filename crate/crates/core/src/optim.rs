//! Adam with bias correction.
//!
//! Weight decay is coupled: `l2` adds `2·l2·θ` to each gradient, which is the
//! gradient of `l2·‖θ‖²` in the loss. The training loop puts that term in the
//! loss itself and calls [`AdamState::step`] with `l2 = 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_b1")]
    pub b1: f64,
    #[serde(default = "default_b2")]
    pub b2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_b1() -> f64 {
    0.9
}
fn default_b2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            b1: default_b1(),
            b2: default_b2(),
            eps: default_eps(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        Self {
            config,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [Tensor], l2: f64) -> Result<()> {
        let lr = self.config.lr;
        self.step_with_lr(params, l2, lr)
    }

    /// One update using `lr` in place of the configured rate (for schedules).
    pub fn step_with_lr(&mut self, params: &mut [Tensor], l2: f64, lr: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(crate::error::invalid(
                "adam_step",
                format!("expected {} parameters, got {}", self.m.len(), params.len()),
            ));
        }
        for (i, p) in params.iter().enumerate() {
            match &p.grad {
                Some(g) if g.len() == p.numel() && self.m[i].len() == p.numel() => {}
                Some(_) => {
                    return Err(Error::ShapeMismatch {
                        op: "adam_step",
                        lhs: p.shape().to_vec(),
                        rhs: vec![self.m[i].len()],
                    })
                }
                None => return Err(Error::MissingGradient(i)),
            }
        }
        self.t += 1;
        let AdamConfig { b1, b2, eps, .. } = self.config;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = p.grad.take().expect("checked above");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j] + 2.0 * l2 * *w;
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
            p.grad = Some(g);
        }
        Ok(())
    }
}
