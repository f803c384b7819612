use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use umnmt_tensor::{Graph, Var};

use super::config::TrainConfig;
use super::losses::{loss_auto, loss_cycle, NoiseConfig};
use super::optim::Adam;
use crate::corpus::{Batch, Modality};
use crate::error::{Error, Result};
use crate::model::{Dropout, Model};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss_auto_x: f64,
    pub loss_auto_y: f64,
    pub loss_cyc_x: Option<f64>,
    pub loss_cyc_y: Option<f64>,
    pub total: f64,
    pub modality: Modality,
    pub lr: f64,
    /// Target tokens scored by the losses of this step.
    pub tokens: usize,
    pub tokens_per_sec: f64,
}

pub(crate) fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Random streams of one step: text/image corruption and dropout.
pub struct StepRngs {
    pub noise: ChaCha8Rng,
    pub dropout: ChaCha8Rng,
}

impl StepRngs {
    pub fn new(seed: u64, step: usize) -> Self {
        Self {
            noise: ChaCha8Rng::seed_from_u64(mix(seed, 2 * step as u64 + 1)),
            dropout: ChaCha8Rng::seed_from_u64(mix(seed, 2 * step as u64 + 2)),
        }
    }
}

/// The four losses of one step and their weighted sum.
pub struct StepLosses {
    pub auto_x: Var,
    pub auto_y: Var,
    pub cyc_x: Option<Var>,
    pub cyc_y: Option<Var>,
    pub total: Var,
}

/// Builds all four losses on `g`. Cycle terms are skipped before
/// `cycle_start` or when their weight is zero.
pub fn step_losses(
    model: &Model,
    g: &Graph,
    batch_x: &Batch,
    batch_y: &Batch,
    cfg: &TrainConfig,
    step: usize,
    rngs: &mut StepRngs,
) -> Result<StepLosses> {
    if batch_x.modality != batch_y.modality {
        return Err(Error::Modality(
            "paired batches must share a modality".into(),
        ));
    }
    let noise = NoiseConfig {
        p_del: cfg.p_del,
        k_w: cfg.k_w,
        p_drop: cfg.p_drop,
    };
    let p = model.config().dropout_p;
    let mut drop = if p > 0.0 {
        Dropout::On {
            p,
            rng: &mut rngs.dropout,
        }
    } else {
        Dropout::Off
    };
    let auto_x = loss_auto(model, g, batch_x, &noise, &mut rngs.noise, &mut drop)?;
    let auto_y = loss_auto(model, g, batch_y, &noise, &mut rngs.noise, &mut drop)?;
    let with_cycle = cfg.w_cyc > 0.0 && step >= cfg.cycle_start;
    let (cyc_x, cyc_y) = if with_cycle {
        (
            Some(loss_cycle(model, g, batch_x, &mut drop)?),
            Some(loss_cycle(model, g, batch_y, &mut drop)?),
        )
    } else {
        (None, None)
    };
    let mut total = g.scale(g.add(auto_x, auto_y)?, cfg.w_auto)?;
    if let (Some(a), Some(b)) = (cyc_x, cyc_y) {
        total = g.add(total, g.scale(g.add(a, b)?, cfg.w_cyc)?)?;
    }
    Ok(StepLosses {
        auto_x,
        auto_y,
        cyc_x,
        cyc_y,
        total,
    })
}

/// Runs the forward and backward pass of one step and folds the
/// gradients into `model.params` without updating the weights.
pub fn accumulate_step_gradients(
    model: &mut Model,
    batch_x: &Batch,
    batch_y: &Batch,
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepMetrics> {
    let start = Instant::now();
    let mut rngs = StepRngs::new(cfg.seed, step);
    let g = Graph::new();
    let losses = step_losses(model, &g, batch_x, batch_y, cfg, step, &mut rngs)?;
    g.backward(losses.total)?;
    model.params.accumulate_grads(&g);
    let val = |v: Var| g.value(v).item();
    let tokens: usize = [batch_x, batch_y]
        .iter()
        .flat_map(|b| b.texts())
        .map(|t| t.len() + 1)
        .sum();
    let tokens = if losses.cyc_x.is_some() {
        2 * tokens
    } else {
        tokens
    };
    Ok(StepMetrics {
        step,
        loss_auto_x: val(losses.auto_x),
        loss_auto_y: val(losses.auto_y),
        loss_cyc_x: losses.cyc_x.map(val),
        loss_cyc_y: losses.cyc_y.map(val),
        total: val(losses.total),
        modality: batch_x.modality,
        lr: cfg.lr_at(step),
        tokens,
        tokens_per_sec: tokens as f64 / start.elapsed().as_secs_f64().max(1e-9),
    })
}

/// One optimization step over a pair of same-modality batches.
pub fn train_step(
    model: &mut Model,
    opt: &mut Adam,
    batch_x: &Batch,
    batch_y: &Batch,
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepMetrics> {
    let start = Instant::now();
    model.params.zero_grads();
    let mut metrics = accumulate_step_gradients(model, batch_x, batch_y, cfg, step)?;
    opt.update(&mut model.params, cfg.lr_at(step))?;
    metrics.tokens_per_sec = metrics.tokens as f64 / start.elapsed().as_secs_f64().max(1e-9);
    Ok(metrics)
}
