use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::Path;

use serde_json::{json, Value};
use umnmt::corpus::{
    read_features, tokenize, ImageFeatureGrid, Lang, Modality, ModalitySchedule, TokenSeq, Vocab,
    NUM_SPECIALS,
};
use umnmt::diagnostics::{gradient_suite, GRAD_TOLERANCE};
use umnmt::eval::{evaluate, extract_attention, translate, write_attention_jsonl, EvalModality};
use umnmt::model::{Checkpoint, Gates, Model};
use umnmt::training::{run_schedule, RunOptions, Schedule};

use crate::config::RunConfig;
use crate::data::{prepare_out_dir, vocab_file, write_synthetic, Dataset};
use crate::error::{CliError, CliResult};

pub const CONFIG_ECHO: &str = "config.json";
pub const REPORT: &str = "report.json";

pub fn parse_lang_pair(s: &str) -> CliResult<(Lang, Lang)> {
    match s {
        "x-y" => Ok((Lang::X, Lang::Y)),
        "y-x" => Ok((Lang::Y, Lang::X)),
        _ => Err(CliError::Usage(format!(
            "--lang-pair must be x-y or y-x, got `{s}`"
        ))),
    }
}

fn write_json(path: &Path, value: &Value) -> CliResult<()> {
    fs::write(
        path,
        serde_json::to_string_pretty(value).expect("json serializes") + "\n",
    )?;
    Ok(())
}

pub fn prepare_data(config: &Path, out: &Path, force: bool) -> CliResult<()> {
    let cfg = RunConfig::load(config)?;
    prepare_out_dir(out, force)?;
    let manifest = write_synthetic(out, cfg.data.seed, &cfg.data.synth)?;
    fs::write(out.join(CONFIG_ECHO), cfg.to_json())?;
    eprintln!(
        "prepared {} x / {} y training sentences, {} valid, {} test in {}",
        manifest.counts.train_x,
        manifest.counts.train_y,
        manifest.counts.valid,
        manifest.counts.test,
        out.display()
    );
    Ok(())
}

/// Vocabularies and their hashes, stored in every checkpoint of a run.
fn run_meta(ds: &Dataset, cfg: &RunConfig) -> CliResult<Value> {
    Ok(json!({
        "vocab_x": ds.vocab_x.tokens(),
        "vocab_y": ds.vocab_y.tokens(),
        "vocab_hash_x": ds.vocab_hash(Lang::X)?,
        "vocab_hash_y": ds.vocab_hash(Lang::Y)?,
        "config": cfg,
    }))
}

fn check_data_integrity(ds: &Dataset, cfg: &RunConfig) -> CliResult<()> {
    for lang in [Lang::X, Lang::Y] {
        let name = vocab_file(lang);
        let hash = ds.vocab_hash(lang)?;
        if ds.manifest.files.get(&name) != Some(&hash) {
            return Err(CliError::Data(format!(
                "{name} does not match the hash recorded in the manifest"
            )));
        }
        let want = cfg.model.vocab_size(lang);
        let have = ds.vocab(lang).len();
        if want != have {
            return Err(CliError::Data(format!(
                "model.vocab_size_{lang} is {want} but {name} has {have} entries"
            )));
        }
    }
    Ok(())
}

/// Refuses checkpoints trained on a different vocabulary.
fn check_checkpoint_vocab(ckpt: &Checkpoint, ds: &Dataset) -> CliResult<()> {
    for lang in [Lang::X, Lang::Y] {
        let recorded = ckpt.meta["run"][format!("vocab_hash_{lang}")].as_str();
        match recorded {
            Some(h) if h == ds.vocab_hash(lang)? => {}
            Some(_) => {
                return Err(CliError::Data(format!(
                    "checkpoint vocabulary {lang} does not match {}",
                    ds.dir.join(vocab_file(lang)).display()
                )))
            }
            None => return Err(CliError::Data("checkpoint records no vocabulary".into())),
        }
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Checkpoint::load(path)
        .map_err(|e| CliError::Data(format!("cannot load checkpoint {}: {e}", path.display())))
}

fn checkpoint_vocab(ckpt: &Checkpoint, lang: Lang) -> CliResult<Vocab> {
    let tokens = ckpt.meta["run"][format!("vocab_{lang}")]
        .as_array()
        .ok_or_else(|| CliError::Data("checkpoint records no vocabulary".into()))?;
    let words: Vec<String> = tokens
        .iter()
        .skip(NUM_SPECIALS)
        .map(|t| t.as_str().map(str::to_string))
        .collect::<Option<_>>()
        .ok_or_else(|| CliError::Data("checkpoint vocabulary is malformed".into()))?;
    Ok(Vocab::from_tokens(words)?)
}

pub fn train(
    config: &Path,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
    force: bool,
) -> CliResult<()> {
    let cfg = RunConfig::load(config)?;
    let ds = Dataset::open(data)?;
    check_data_integrity(&ds, &cfg)?;
    let uses_images = cfg.train.effective_modality() != ModalitySchedule::TextOnly;
    let train_data = ds.train_data(uses_images)?;

    let resume_ckpt = resume.map(load_checkpoint).transpose()?;
    if let Some(c) = &resume_ckpt {
        check_checkpoint_vocab(c, &ds)?;
    }
    let init_ckpt = match (
        &cfg.train.schedule,
        &cfg.train.init_checkpoint,
        &resume_ckpt,
    ) {
        (Schedule::FinetuneMultimodal, Some(path), None) => Some(load_checkpoint(path)?),
        (Schedule::FinetuneMultimodal, None, None) => {
            return Err(CliError::Usage(
                "finetune_multimodal needs train.init_checkpoint".into(),
            ))
        }
        _ => None,
    };
    if let Some(c) = &init_ckpt {
        check_checkpoint_vocab(c, &ds)?;
    }
    match resume_ckpt {
        Some(_) => fs::create_dir_all(out)?,
        None => prepare_out_dir(out, force)?,
    }
    fs::write(out.join(CONFIG_ECHO), cfg.to_json())?;

    let meta = run_meta(&ds, &cfg)?;
    let opts = RunOptions {
        out_dir: Some(out),
        resume: resume_ckpt.as_ref(),
        init: init_ckpt.as_ref(),
        stop_after: None,
        meta: Some(&meta),
    };
    let outcome = run_schedule(&cfg.model, &cfg.train, &train_data, opts)?;

    let mut modality = cfg.eval.modality;
    let image_ready = outcome.best.config().image_pathway
        && outcome
            .best
            .config()
            .gates_for(Modality::TextImage)
            .wants_image();
    let pairs = ds.pairs(&cfg.eval.split, false)?;
    if modality == EvalModality::WithImage
        && (!image_ready || pairs.iter().any(|p| p.image.is_none()))
    {
        eprintln!("image evaluation unavailable for this run; reporting text_only");
        modality = EvalModality::TextOnly;
    }
    let report = evaluate(&outcome.best, &pairs, modality)?;
    write_json(
        &out.join(REPORT),
        &json!({"split": cfg.eval.split, "step": outcome.best_step, "report": report}),
    )?;
    eprintln!(
        "trained to step {}; best step {} ({} token accuracy {:.4}, BLEU {:.4})",
        outcome.metrics.last().map_or(0, |m| m.step + 1),
        outcome.best_step,
        cfg.eval.split,
        report.token_accuracy,
        report.bleu
    );
    Ok(())
}

pub fn translate_file(
    ckpt: &Path,
    input: &Path,
    features: Option<&Path>,
    lang_pair: &str,
) -> CliResult<()> {
    let (src, tgt) = parse_lang_pair(lang_pair)?;
    let ckpt = load_checkpoint(ckpt)?;
    let model = Model::from_checkpoint(&ckpt)?;
    let src_vocab = checkpoint_vocab(&ckpt, src)?;
    let tgt_vocab = checkpoint_vocab(&ckpt, tgt)?;
    let text = fs::read_to_string(input)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", input.display())))?;
    let sources: Vec<TokenSeq> = text
        .lines()
        .enumerate()
        .map(|(i, line)| {
            tokenize(line)
                .and_then(|t| src_vocab.encode(src, &t))
                .map_err(|e| CliError::Data(format!("{} line {}: {e}", input.display(), i + 1)))
        })
        .collect::<CliResult<_>>()?;
    let grids: Option<Vec<ImageFeatureGrid>> = match features {
        Some(path) => {
            let grids = read_features(BufReader::new(File::open(path)?))?;
            if grids.len() != sources.len() {
                return Err(CliError::Data(format!(
                    "{} has {} grids for {} input lines",
                    path.display(),
                    grids.len(),
                    sources.len()
                )));
            }
            if !model.config().image_pathway {
                return Err(CliError::Usage(
                    "checkpoint has no image pathway; omit --features".into(),
                ));
            }
            Some(grids)
        }
        None => None,
    };
    let gates = match grids {
        Some(_) => Gates {
            image: true,
            composed: model.config().lambda2 > 0,
        },
        None => Gates::TEXT_ONLY,
    };
    let refs: Vec<&TokenSeq> = sources.iter().collect();
    let image_refs: Option<Vec<&ImageFeatureGrid>> = grids.as_ref().map(|g| g.iter().collect());
    let hyps = translate(&model, &refs, src, image_refs.as_deref(), gates)?;
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    for h in hyps {
        writeln!(out, "{}", tgt_vocab.decode(&h.ids).join(" "))?;
    }
    out.flush()?;
    Ok(())
}

fn sink(out: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

pub fn evaluate_split(
    ckpt_path: &Path,
    data: &Path,
    split: &str,
    modality: EvalModality,
    out: Option<&Path>,
) -> CliResult<()> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let model = Model::from_checkpoint(&ckpt)?;
    let ds = Dataset::open(data)?;
    check_checkpoint_vocab(&ckpt, &ds)?;
    let pairs = ds.pairs(split, modality == EvalModality::WithImage)?;
    let report = evaluate(&model, &pairs, modality)?;
    let value = json!({"split": split, "checkpoint": ckpt_path, "report": report});
    let mut w = sink(out)?;
    serde_json::to_writer_pretty(&mut w, &value).map_err(|e| CliError::Data(e.to_string()))?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub struct ExportArgs<'a> {
    pub ckpt: &'a Path,
    pub data: &'a Path,
    pub split: &'a str,
    pub lang_pair: &'a str,
    pub limit: Option<usize>,
    pub reference: bool,
    pub text_only: bool,
    pub out: Option<&'a Path>,
}

pub fn export_attention(args: ExportArgs<'_>) -> CliResult<()> {
    let (src, tgt) = parse_lang_pair(args.lang_pair)?;
    let ckpt = load_checkpoint(args.ckpt)?;
    let model = Model::from_checkpoint(&ckpt)?;
    let ds = Dataset::open(args.data)?;
    check_checkpoint_vocab(&ckpt, &ds)?;
    let pairs = ds.pairs(args.split, !args.text_only)?;
    let use_image = !args.text_only
        && model.config().image_pathway
        && model.config().gates_for(Modality::TextImage).wants_image();
    let gates = if use_image {
        model.config().gates_for(Modality::TextImage)
    } else {
        Gates::TEXT_ONLY
    };
    let mut w = sink(args.out)?;
    for (i, pair) in pairs
        .iter()
        .take(args.limit.unwrap_or(usize::MAX))
        .enumerate()
    {
        let source = pair.side(src);
        let image = if use_image {
            pair.image.as_deref()
        } else {
            None
        };
        let target = if args.reference {
            pair.side(tgt).clone()
        } else {
            let images = image.map(|g| vec![g]);
            translate(&model, &[source], src, images.as_deref(), gates)?.remove(0)
        };
        let maps = extract_attention(&model, source, image, &target)?;
        write_attention_jsonl(&mut w, &maps, ds.vocab(tgt), i)?;
    }
    w.flush()?;
    Ok(())
}

pub fn gradcheck(seed: u64) -> CliResult<()> {
    let cases = gradient_suite(seed)?;
    let mut worst: f64 = 0.0;
    for c in &cases {
        worst = worst.max(c.max_rel_error);
        println!(
            "{:<28} max_rel_error={:.3e} entries={:<6} {}",
            c.name,
            c.max_rel_error,
            c.entries_checked,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    println!("max_rel_error={worst:.3e} tolerance={GRAD_TOLERANCE:.0e}");
    match cases.iter().filter(|c| !c.passed()).count() {
        0 => Ok(()),
        n => Err(CliError::Numerics(format!(
            "{n} gradient checks exceed {GRAD_TOLERANCE:.0e}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lang_pairs() {
        assert_eq!(parse_lang_pair("x-y").unwrap(), (Lang::X, Lang::Y));
        assert_eq!(parse_lang_pair("y-x").unwrap(), (Lang::Y, Lang::X));
        assert_eq!(parse_lang_pair("x-x").unwrap_err().code(), 1);
    }
}
