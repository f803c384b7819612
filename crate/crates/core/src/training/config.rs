use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::optim::AdamConfig;
use crate::corpus::ModalitySchedule;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Fresh weights, trained on `modality` batches.
    #[default]
    Scratch,
    /// Fresh weights, text-only batches.
    PretrainText,
    /// Text weights from `init_checkpoint`, fresh image weights, alternating
    /// batches.
    FinetuneMultimodal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Linear decay from `lr` to a tenth of it between this step and the last.
    pub lr_decay_start: Option<usize>,
    pub adam: AdamConfig,
    pub w_auto: f64,
    pub w_cyc: f64,
    /// First step that includes the cycle losses.
    pub cycle_start: usize,
    pub p_del: f64,
    pub k_w: usize,
    pub p_drop: f64,
    pub schedule: Schedule,
    pub modality: ModalitySchedule,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 writes only the last.
    pub checkpoint_every: usize,
    /// Validate every this many steps; 0 validates only at the end.
    pub eval_every: usize,
    /// Validation pairs used per evaluation; 0 uses all of them.
    pub eval_pairs: usize,
    pub init_checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            lr_decay_start: None,
            adam: AdamConfig::default(),
            w_auto: 1.0,
            w_cyc: 1.0,
            cycle_start: 0,
            p_del: 0.1,
            k_w: 3,
            p_drop: 0.1,
            schedule: Schedule::Scratch,
            modality: ModalitySchedule::Alternate,
            steps: 1000,
            batch_size: 32,
            seed: 0,
            checkpoint_every: 0,
            eval_every: 100,
            eval_pairs: 0,
            init_checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(msg.into()))
            }
        };
        check(self.lr > 0.0 && self.lr.is_finite(), "lr must be positive")?;
        check(
            self.w_auto >= 0.0 && self.w_cyc >= 0.0,
            "loss weights must be non-negative",
        )?;
        check(self.steps >= 1, "steps must be at least 1")?;
        check(self.batch_size >= 1, "batch_size must be at least 1")?;
        check((0.0..1.0).contains(&self.p_del), "p_del must lie in [0, 1)")?;
        check(
            (0.0..1.0).contains(&self.p_drop),
            "p_drop must lie in [0, 1)",
        )?;
        let a = &self.adam;
        check(
            (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0,
            "invalid optimizer settings",
        )?;
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        match self.lr_decay_start {
            Some(start) if step >= start && self.steps > start => {
                let frac = (step - start) as f64 / (self.steps - start) as f64;
                self.lr * (1.0 - 0.9 * frac.min(1.0))
            }
            _ => self.lr,
        }
    }

    /// Batch modality pattern actually used by the schedule.
    pub fn effective_modality(&self) -> ModalitySchedule {
        match self.schedule {
            Schedule::Scratch => self.modality,
            Schedule::PretrainText => ModalitySchedule::TextOnly,
            Schedule::FinetuneMultimodal => ModalitySchedule::Alternate,
        }
    }
}
