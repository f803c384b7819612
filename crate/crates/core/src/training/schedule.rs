use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::{Schedule, TrainConfig};
use super::optim::Adam;
use super::step::{mix, train_step, StepMetrics};
use crate::corpus::{Batch, EpochSampler, Example, Lang, ParallelPair};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalModality};
use crate::model::{is_image_param, Checkpoint, Model, ModelConfig};

/// Monolingual training examples per language plus held-out pairs.
#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub x: Vec<Example>,
    pub y: Vec<Example>,
    pub valid: Vec<ParallelPair>,
}

impl TrainData {
    fn side(&self, lang: Lang) -> &[Example] {
        match lang {
            Lang::X => &self.x,
            Lang::Y => &self.y,
        }
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct RunOptions<'a> {
    /// Run directory for `metrics.jsonl` and `ckpt/`.
    pub out_dir: Option<&'a Path>,
    /// Training state to continue from.
    pub resume: Option<&'a Checkpoint>,
    /// Pretrained weights for fine-tuning; otherwise `init_checkpoint` is read.
    pub init: Option<&'a Checkpoint>,
    /// Stop once this many steps are complete.
    pub stop_after: Option<usize>,
    /// Stored under `run` in every checkpoint header.
    pub meta: Option<&'a serde_json::Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationPoint {
    pub step: usize,
    pub token_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub best: Model,
    pub best_step: usize,
    pub best_valid: f64,
    pub metrics: Vec<StepMetrics>,
    pub validations: Vec<ValidationPoint>,
    pub checkpoints: Vec<PathBuf>,
}

/// Pretrained text weights with freshly initialized image weights.
pub fn finetune_init(pretrained: &Model) -> Result<Model> {
    let mut cfg = ModelConfig {
        image_pathway: true,
        ..pretrained.config().clone()
    };
    if cfg.lambda1 == 0 && cfg.lambda2 == 0 {
        cfg.lambda1 = 1;
    }
    let mut model = Model::new(cfg)?;
    for (_, p) in model.params.iter_mut() {
        if is_image_param(&p.name) {
            continue;
        }
        let src = pretrained
            .params
            .by_name(&p.name)
            .ok_or_else(|| Error::Config(format!("pretrained model lacks `{}`", p.name)))?;
        p.value = src.value.clone();
    }
    Ok(model)
}

fn check_data(cfg: &TrainConfig, model_cfg: &ModelConfig, data: &TrainData) -> Result<()> {
    for lang in [Lang::X, Lang::Y] {
        let side = data.side(lang);
        if side.is_empty() {
            return Err(Error::Data(format!("no {lang} training sentences")));
        }
        let vocab = model_cfg.vocab_size(lang);
        if side.iter().any(|e| e.text.ids.iter().any(|&i| i >= vocab)) {
            return Err(Error::Data(format!(
                "{lang} token ids exceed the model vocabulary of {vocab}"
            )));
        }
        if cfg.effective_modality() != crate::corpus::ModalitySchedule::TextOnly
            && side.iter().any(|e| e.image.is_none())
        {
            return Err(Error::Data(format!(
                "{lang} training data lacks image features"
            )));
        }
    }
    Ok(())
}

fn validation_modality(cfg: &TrainConfig, model: &Model, data: &TrainData) -> EvalModality {
    let uses_images = cfg.effective_modality() != crate::corpus::ModalitySchedule::TextOnly;
    let gated = model
        .config()
        .gates_for(crate::corpus::Modality::TextImage)
        .wants_image();
    if uses_images && gated && data.valid.iter().all(|p| p.image.is_some()) {
        EvalModality::WithImage
    } else {
        EvalModality::TextOnly
    }
}

fn state_checkpoint(
    model: &Model,
    opt: &Adam,
    cfg: &TrainConfig,
    step: usize,
    best: (usize, f64),
    validations: &[ValidationPoint],
    run: Option<&serde_json::Value>,
) -> Result<Checkpoint> {
    let meta = json!({
        "run": run,
        "step": step,
        "optimizer": {"kind": "adam", "config": opt.config, "steps": opt.steps},
        "train": cfg,
        "best_step": best.0,
        "best_valid": best.1,
        "validations": validations,
    });
    model.checkpoint(meta, opt.state_tensors(&model.params))
}

fn load_init(cfg: &TrainConfig, opts: &RunOptions<'_>) -> Result<Model> {
    let owned;
    let ckpt = match (opts.init, &cfg.init_checkpoint) {
        (Some(c), _) => c,
        (None, Some(path)) => {
            owned = Checkpoint::load(path).map_err(|e| {
                Error::Config(format!(
                    "cannot read init checkpoint {}: {e}",
                    path.display()
                ))
            })?;
            &owned
        }
        (None, None) => {
            return Err(Error::Config(
                "finetune_multimodal needs init_checkpoint".into(),
            ));
        }
    };
    finetune_init(&Model::from_checkpoint(ckpt)?)
}

/// Trains according to `cfg.schedule`, validating periodically and
/// keeping the weights with the best validation token accuracy.
pub fn run_schedule(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: &TrainData,
    opts: RunOptions<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    let (mut model, mut opt, start, mut best_step, mut best_valid, mut validations) =
        match opts.resume {
            Some(ckpt) => {
                let model = Model::from_checkpoint(ckpt)?;
                let meta = &ckpt.meta;
                let field = |k: &str| {
                    meta.get(k)
                        .ok_or_else(|| Error::format("checkpoint", format!("missing `{k}`")))
                };
                let step = field("step")?.as_u64().unwrap_or(0) as usize;
                let opt_meta = field("optimizer")?;
                let adam_cfg = serde_json::from_value(opt_meta["config"].clone())?;
                let adam_steps = opt_meta["steps"].as_u64().unwrap_or(0);
                let opt = Adam::restore(adam_cfg, adam_steps, &model.params, ckpt)?;
                let best_step = field("best_step")?.as_u64().unwrap_or(0) as usize;
                let best_valid = field("best_valid")?.as_f64().unwrap_or(f64::NEG_INFINITY);
                let validations = serde_json::from_value(field("validations")?.clone())?;
                (model, opt, step, best_step, best_valid, validations)
            }
            None => {
                let model = match cfg.schedule {
                    Schedule::Scratch | Schedule::PretrainText => Model::new(model_cfg.clone())?,
                    Schedule::FinetuneMultimodal => load_init(cfg, &opts)?,
                };
                let opt = Adam::new(cfg.adam, &model.params);
                (model, opt, 0, 0, f64::NEG_INFINITY, Vec::new())
            }
        };
    check_data(cfg, model.config(), data)?;
    let modality = cfg.effective_modality();
    let valid_modality = validation_modality(cfg, &model, data);
    let valid: Vec<ParallelPair> = match cfg.eval_pairs {
        0 => data.valid.clone(),
        n => data.valid.iter().take(n).cloned().collect(),
    };

    let ckpt_dir = opts.out_dir.map(|d| d.join("ckpt"));
    if let Some(dir) = &ckpt_dir {
        fs::create_dir_all(dir)?;
    }
    let mut log = match opts.out_dir {
        Some(dir) => Some(BufWriter::new(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join("metrics.jsonl"))?,
        )),
        None => None,
    };
    let mut best = match ckpt_dir.as_ref().map(|d| d.join("best.umck")) {
        Some(path) if opts.resume.is_some() && path.exists() => {
            Model::from_checkpoint(&Checkpoint::load(&path)?)?
        }
        _ => model.clone(),
    };

    let mut sampler_x =
        EpochSampler::new(data.x.len(), cfg.batch_size, mix(cfg.seed, 0x5EED_0001))?;
    let mut sampler_y =
        EpochSampler::new(data.y.len(), cfg.batch_size, mix(cfg.seed, 0x5EED_0002))?;
    let end = opts.stop_after.map_or(cfg.steps, |s| s.min(cfg.steps));
    let mut metrics = Vec::new();
    let mut checkpoints = Vec::new();
    for step in start..end {
        let m = modality.modality_at(step);
        let bx = Batch::new(
            sampler_x
                .indices(step)
                .into_iter()
                .map(|i| data.x[i].clone())
                .collect(),
            m,
        )?;
        let by = Batch::new(
            sampler_y
                .indices(step)
                .into_iter()
                .map(|i| data.y[i].clone())
                .collect(),
            m,
        )?;
        let sm = train_step(&mut model, &mut opt, &bx, &by, cfg, step)?;
        if let Some(w) = log.as_mut() {
            serde_json::to_writer(&mut *w, &sm)?;
            w.write_all(b"\n")?;
        }
        metrics.push(sm);
        let done = step + 1;
        let last = done == cfg.steps;
        let validate =
            !valid.is_empty() && (last || (cfg.eval_every > 0 && done % cfg.eval_every == 0));
        if validate {
            let acc = evaluate(&model, &valid, valid_modality)?.token_accuracy;
            validations.push(ValidationPoint {
                step: done,
                token_accuracy: acc,
            });
            if acc > best_valid {
                best_valid = acc;
                best_step = done;
                best = model.clone();
                if let Some(dir) = &ckpt_dir {
                    state_checkpoint(
                        &best,
                        &opt,
                        cfg,
                        done,
                        (best_step, best_valid),
                        &validations,
                        opts.meta,
                    )?
                    .save(&dir.join("best.umck"))?;
                }
            }
        }
        let save =
            last || done == end || (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0);
        if let (true, Some(dir)) = (save, &ckpt_dir) {
            let path = dir.join(format!("step-{done}.umck"));
            state_checkpoint(
                &model,
                &opt,
                cfg,
                done,
                (best_step, best_valid),
                &validations,
                opts.meta,
            )?
            .save(&path)?;
            checkpoints.push(path);
        }
    }
    if let Some(mut w) = log {
        w.flush()?;
    }
    if valid.is_empty() {
        best = model.clone();
        best_step = end;
    }
    Ok(TrainOutcome {
        model,
        best,
        best_step,
        best_valid,
        metrics,
        validations,
        checkpoints,
    })
}
