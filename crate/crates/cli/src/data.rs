use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use umnmt::corpus::{
    gen_synthetic, read_features, tokenize, write_features, Example, ImageFeatureGrid, Lang,
    ParallelPair, SynthConfig, SynthSentence, TokenSeq, Vocab,
};
use umnmt::training::TrainData;

use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub train_x: usize,
    pub train_y: usize,
    pub valid: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub synth: SynthConfig,
    pub counts: Counts,
    /// SHA-256 of every written file, by file name.
    pub files: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn vocab_file(lang: Lang) -> String {
    format!("vocab.{lang}.txt")
}

pub fn text_file(split: &str, lang: Lang) -> String {
    format!("{split}.{lang}.txt")
}

/// Feature file of a split; training halves have one per language.
pub fn feature_file(split: &str, lang: Option<Lang>) -> String {
    match lang {
        Some(l) => format!("{split}.{l}.umfm"),
        None => format!("{split}.umfm"),
    }
}

fn is_non_empty_dir(dir: &Path) -> CliResult<bool> {
    Ok(dir.is_dir() && fs::read_dir(dir)?.next().is_some())
}

/// Refuses to write into a non-empty directory unless forced.
pub fn prepare_out_dir(dir: &Path, force: bool) -> CliResult<()> {
    if dir.exists() && !dir.is_dir() {
        return Err(CliError::Usage(format!(
            "{} is not a directory",
            dir.display()
        )));
    }
    if is_non_empty_dir(dir)? && !force {
        return Err(CliError::Usage(format!(
            "{} is not empty; pass --force to overwrite",
            dir.display()
        )));
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

struct Writer<'a> {
    dir: &'a Path,
    files: BTreeMap<String, String>,
}

impl Writer<'_> {
    fn put(&mut self, name: &str, bytes: Vec<u8>) -> CliResult<()> {
        fs::write(self.dir.join(name), &bytes)?;
        self.files.insert(name.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    fn lines(&mut self, name: &str, rows: impl Iterator<Item = String>) -> CliResult<()> {
        let mut out = String::new();
        for r in rows {
            out.push_str(&r);
            out.push('\n');
        }
        self.put(name, out.into_bytes())
    }

    fn features<'s>(
        &mut self,
        name: &str,
        set: impl Iterator<Item = &'s SynthSentence>,
    ) -> CliResult<()> {
        let grids: Vec<ImageFeatureGrid> = set.map(|s| s.image.as_ref().clone()).collect();
        let mut buf = Vec::new();
        write_features(&mut buf, &grids)?;
        self.put(name, buf)
    }
}

/// Generates the synthetic corpus and writes texts, vocabularies,
/// features, the lexicon, grounding cells and the manifest into `dir`.
pub fn write_synthetic(dir: &Path, seed: u64, synth: &SynthConfig) -> CliResult<Manifest> {
    let data = gen_synthetic(synth, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let mut w = Writer {
        dir,
        files: BTreeMap::new(),
    };
    for lang in [Lang::X, Lang::Y] {
        let mut buf = Vec::new();
        data.vocab(lang)?.write_to(&mut buf)?;
        w.put(&vocab_file(lang), buf)?;
    }
    w.lines(
        &text_file("train", Lang::X),
        data.train_x.iter().map(|s| s.x.join(" ")),
    )?;
    w.lines(
        &text_file("train", Lang::Y),
        data.train_y.iter().map(|s| s.y.join(" ")),
    )?;
    w.features(&feature_file("train", Some(Lang::X)), data.train_x.iter())?;
    w.features(&feature_file("train", Some(Lang::Y)), data.train_y.iter())?;
    for (split, set) in [("valid", &data.valid), ("test", &data.test)] {
        w.lines(
            &text_file(split, Lang::X),
            set.iter().map(|s| s.x.join(" ")),
        )?;
        w.lines(
            &text_file(split, Lang::Y),
            set.iter().map(|s| s.y.join(" ")),
        )?;
        w.features(&feature_file(split, None), set.iter())?;
        w.lines(
            &format!("{split}.cells.jsonl"),
            set.iter()
                .map(|s| serde_json::json!({"x": s.cells_x, "y": s.cells_y}).to_string()),
        )?;
    }
    w.lines(
        "lexicon.tsv",
        data.lexicon.iter().map(|x| {
            let class = serde_json::to_value(data.classes[x]).expect("class serializes");
            format!(
                "{x}\t{}\t{}",
                data.cipher.encrypt(x).expect("enciphered"),
                class.as_str().unwrap_or("")
            )
        }),
    )?;
    let manifest = Manifest {
        seed,
        synth: synth.clone(),
        counts: Counts {
            train_x: data.train_x.len(),
            train_y: data.train_y.len(),
            valid: data.valid.len(),
            test: data.test.len(),
        },
        files: w.files,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    fs::write(dir.join(MANIFEST), text)?;
    Ok(manifest)
}

fn read_in(dir: &Path, name: &str) -> CliResult<Vec<u8>> {
    fs::read(dir.join(name))
        .map_err(|e| CliError::Data(format!("data directory lacks {name}: {e}")))
}

/// A prepared data directory.
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub vocab_x: Vocab,
    pub vocab_y: Vocab,
}

impl Dataset {
    pub fn open(dir: &Path) -> CliResult<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| {
            CliError::Data(format!(
                "{} is not a prepared data directory: {e}",
                dir.display()
            ))
        })?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let vocab = |lang: Lang| -> CliResult<Vocab> {
            let bytes = read_in(dir, &vocab_file(lang))?;
            Ok(Vocab::read_from(BufReader::new(bytes.as_slice()))?)
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            vocab_x: vocab(Lang::X)?,
            vocab_y: vocab(Lang::Y)?,
        })
    }

    fn read(&self, name: &str) -> CliResult<Vec<u8>> {
        read_in(&self.dir, name)
    }

    pub fn vocab(&self, lang: Lang) -> &Vocab {
        match lang {
            Lang::X => &self.vocab_x,
            Lang::Y => &self.vocab_y,
        }
    }

    /// Hash of the vocabulary file as it is on disk now.
    pub fn vocab_hash(&self, lang: Lang) -> CliResult<String> {
        Ok(sha256_hex(&self.read(&vocab_file(lang))?))
    }

    fn texts(&self, split: &str, lang: Lang) -> CliResult<Vec<TokenSeq>> {
        let name = text_file(split, lang);
        let text = String::from_utf8(self.read(&name)?)
            .map_err(|_| CliError::Data(format!("{name} is not UTF-8")))?;
        text.lines()
            .enumerate()
            .map(|(i, line)| {
                tokenize(line)
                    .and_then(|t| self.vocab(lang).encode(lang, &t))
                    .map_err(|e| CliError::Data(format!("{name} line {}: {e}", i + 1)))
            })
            .collect()
    }

    /// Feature grids of a file; `None` when the file is absent.
    fn features(&self, name: &str, expect: usize) -> CliResult<Option<Vec<Arc<ImageFeatureGrid>>>> {
        let path = self.dir.join(name);
        if !path.exists() {
            return Ok(None);
        }
        let grids = read_features(BufReader::new(File::open(&path)?))?;
        if grids.len() != expect {
            return Err(CliError::Data(format!(
                "{name} has {} grids for {expect} sentences",
                grids.len()
            )));
        }
        Ok(Some(grids.into_iter().map(Arc::new).collect()))
    }

    fn examples(&self, lang: Lang, with_images: bool) -> CliResult<Vec<Example>> {
        let texts = self.texts("train", lang)?;
        let name = feature_file("train", Some(lang));
        match self.features(&name, texts.len())? {
            Some(grids) => Ok(texts
                .into_iter()
                .zip(grids)
                .map(|(t, g)| Example::with_image(t, g))
                .collect()),
            None if with_images => Err(CliError::Data(format!("data directory lacks {name}"))),
            None => Ok(texts.into_iter().map(Example::text_only).collect()),
        }
    }

    /// Aligned pairs of `split` with images when the feature file exists.
    pub fn pairs(&self, split: &str, with_images: bool) -> CliResult<Vec<ParallelPair>> {
        let xs = self.texts(split, Lang::X)?;
        let ys = self.texts(split, Lang::Y)?;
        if xs.len() != ys.len() {
            return Err(CliError::Data(format!(
                "{split} sides have {} and {} lines",
                xs.len(),
                ys.len()
            )));
        }
        let name = feature_file(split, None);
        let grids = match self.features(&name, xs.len())? {
            Some(g) => g.into_iter().map(Some).collect(),
            None if with_images => {
                return Err(CliError::Data(format!("data directory lacks {name}")))
            }
            None => vec![None; xs.len()],
        };
        Ok(xs
            .into_iter()
            .zip(ys)
            .zip(grids)
            .map(|((x, y), image)| ParallelPair { x, y, image })
            .collect())
    }

    pub fn train_data(&self, with_images: bool) -> CliResult<TrainData> {
        Ok(TrainData {
            x: self.examples(Lang::X, with_images)?,
            y: self.examples(Lang::Y, with_images)?,
            valid: self.pairs("valid", with_images)?,
        })
    }
}
