use serde::{Deserialize, Serialize};
use umnmt_tensor::{ParamStore, Real, Tensor};

use crate::error::{Error, Result};
use crate::model::Checkpoint;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// Bias-corrected adaptive-moment optimizer. Parameters and both moment
/// buffers are rounded to float32 after every update, so a saved
/// checkpoint restores the exact training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub steps: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

fn round(x: Real) -> Real {
    x as f32 as Real
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.rows(), p.value.cols()))
                .collect()
        };
        Self {
            config,
            steps: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn update(&mut self, params: &mut ParamStore, lr: Real) -> Result<()> {
        if let Some((_, p)) = params.iter().find(|(_, p)| !p.grad.is_finite()) {
            return Err(Error::NonFiniteGrad(p.name.clone()));
        }
        self.steps += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.steps as i32);
        let c2 = 1.0 - beta2.powi(self.steps as i32);
        for (id, p) in params.iter_mut() {
            let m = self.m[id.index()].data_mut();
            let v = self.v[id.index()].data_mut();
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m)
                .zip(v)
            {
                *m = round(beta1 * *m + (1.0 - beta1) * g);
                *v = round(beta2 * *v + (1.0 - beta2) * g * g);
                let step = lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                *w = round(*w - step);
            }
        }
        params.zero_grads();
        Ok(())
    }

    pub fn state_tensors(&self, params: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * params.len());
        for (id, p) in params.iter() {
            out.push((format!("adam.m/{}", p.name), self.m[id.index()].clone()));
            out.push((format!("adam.v/{}", p.name), self.v[id.index()].clone()));
        }
        out
    }

    pub fn restore(
        config: AdamConfig,
        steps: u64,
        params: &ParamStore,
        ckpt: &Checkpoint,
    ) -> Result<Self> {
        let mut adam = Self::new(config, params);
        adam.steps = steps;
        for (id, p) in params.iter() {
            for (prefix, buf) in [("adam.m/", &mut adam.m), ("adam.v/", &mut adam.v)] {
                let name = format!("{prefix}{}", p.name);
                let t = ckpt.tensor(&name).ok_or_else(|| {
                    Error::format("checkpoint", format!("missing optimizer tensor `{name}`"))
                })?;
                if t.shape() != p.value.shape() {
                    return Err(Error::format(
                        "checkpoint",
                        format!("optimizer tensor `{name}` has the wrong shape"),
                    ));
                }
                buf[id.index()] = t.clone();
            }
        }
        Ok(adam)
    }

    pub fn moments(&self, index: usize) -> (&Tensor, &Tensor) {
        (&self.m[index], &self.v[index])
    }
}
