use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers mirror the parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Vec<f32>>,
    pub second: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        AdamState {
            config,
            step: 0,
            first: params.iter().map(|t| vec![0.0; t.numel()]).collect(),
            second: params.iter().map(|t| vec![0.0; t.numel()]).collect(),
        }
    }

    pub fn for_store(config: AdamConfig, store: &ParamStore) -> Self {
        Self::new(config, store.tensors())
    }

    pub fn step_store(&mut self, store: &mut ParamStore, grads: &[Vec<f32>]) -> Result<()> {
        let names = store.names().to_vec();
        self.apply(store.tensors_mut(), &names, grads)
    }

    /// One update. Validates every gradient first so a bad one leaves all
    /// parameters and moments untouched.
    pub fn apply(&mut self, params: &mut [Tensor], names: &[String], grads: &[Vec<f32>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(Error::InvalidArgument(format!(
                "adam: {} parameters, {} gradients, {} moment buffers",
                params.len(),
                grads.len(),
                self.first.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let name = names.get(i).map(String::as_str).unwrap_or("?");
            if p.numel() != g.len() || self.first[i].len() != g.len() {
                return Err(Error::shape("adam_step", format!("{name}: {} values vs {} gradients", p.numel(), g.len())));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of parameter {name}")));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let (b1, b2) = (beta1 as f64, beta2 as f64);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j] as f64;
                let mj = b1 * m[j] as f64 + (1.0 - b1) * gj;
                let vj = b2 * v[j] as f64 + (1.0 - b2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let update = lr as f64 * (mj / c1) / ((vj / c2).sqrt() + eps as f64);
                *w = (*w as f64 - update) as f32;
            }
        }
        Ok(())
    }
}
