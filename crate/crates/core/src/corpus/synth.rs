use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use umnmt_tensor::Tensor;

use super::batch::{Example, ParallelPair};
use super::features::ImageFeatureGrid;
use super::vocab::{Lang, Vocab};
use crate::error::{Error, Result};

const FUNCTION_WORDS: [&str; 3] = ["the", "a", "."];
const NOUNS: [&str; 12] = [
    "dog", "cat", "man", "woman", "boy", "girl", "horse", "bird", "ball", "child", "car", "tree",
];
const ADJECTIVES: [&str; 10] = [
    "red", "blue", "big", "small", "young", "old", "green", "tall", "happy", "black",
];
const VERBS: [&str; 10] = [
    "sees", "chases", "holds", "likes", "finds", "pulls", "kicks", "watches", "follows", "carries",
];
const ONSETS: [&str; 12] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WordClass {
    Function,
    Noun,
    Adjective,
    Verb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_nouns: usize,
    pub n_adjectives: usize,
    pub n_verbs: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Monolingual sentences per language.
    pub n_samples: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub grid_side: usize,
    pub d_img: usize,
    pub noise_std: f64,
    /// Probability of an adjective in each noun phrase.
    pub p_adjective: f64,
    /// Probability of an object noun phrase.
    pub p_object: f64,
    /// When set, both languages see every training sentence instead of
    /// disjoint halves.
    pub overlap: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_nouns: 9,
            n_adjectives: 6,
            n_verbs: 6,
            min_len: 4,
            max_len: 8,
            n_samples: 2000,
            n_valid: 100,
            n_test: 200,
            grid_side: 4,
            d_img: 32,
            noise_std: 0.1,
            p_adjective: 0.5,
            p_object: 0.5,
            overlap: false,
        }
    }
}

impl SynthConfig {
    pub fn vocab_size(&self) -> usize {
        FUNCTION_WORDS.len() + self.n_nouns + self.n_adjectives + self.n_verbs
    }

    pub fn k_img(&self) -> usize {
        self.grid_side * self.grid_side
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(msg.into()))
            }
        };
        check(
            (1..=NOUNS.len()).contains(&self.n_nouns),
            "n_nouns out of range",
        )?;
        check(
            (1..=ADJECTIVES.len()).contains(&self.n_adjectives),
            "n_adjectives out of range",
        )?;
        check(
            (1..=VERBS.len()).contains(&self.n_verbs),
            "n_verbs out of range",
        )?;
        check(
            self.min_len >= 1 && self.min_len <= self.max_len,
            "sentence length range is empty",
        )?;
        check(
            self.min_len <= 8 && self.max_len >= 4,
            "length range excludes every grammatical sentence",
        )?;
        check(self.n_samples > 0, "n_samples must be positive")?;
        check(
            self.grid_side > 0 && self.d_img > 0,
            "image grid must be non-empty",
        )?;
        check(
            self.noise_std >= 0.0 && self.noise_std.is_finite(),
            "noise_std must be non-negative",
        )?;
        check(
            (0.0..=1.0).contains(&self.p_adjective),
            "p_adjective must be a probability",
        )?;
        check(
            (0.0..=1.0).contains(&self.p_object),
            "p_object must be a probability",
        )?;
        Ok(())
    }
}

/// Word-level bijection from language X to language Y.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cipher {
    forward: HashMap<String, String>,
    inverse: HashMap<String, String>,
}

impl Cipher {
    pub fn encrypt(&self, word: &str) -> Option<&str> {
        self.forward.get(word).map(String::as_str)
    }

    pub fn decrypt(&self, word: &str) -> Option<&str> {
        self.inverse.get(word).map(String::as_str)
    }

    pub fn pairs(&self) -> Vec<(&str, &str)> {
        let mut out: Vec<_> = self
            .forward
            .iter()
            .map(|(a, b)| (a.as_str(), b.as_str()))
            .collect();
        out.sort();
        out
    }
}

/// One generated sentence in both languages with its pseudo-image.
///
/// `cells_x[i]` is the grid cell activated by X token `i` (`None` for
/// function words); `cells_y` is the same for the Y rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSentence {
    pub x: Vec<String>,
    pub y: Vec<String>,
    pub image: Arc<ImageFeatureGrid>,
    pub cells_x: Vec<Option<usize>>,
    pub cells_y: Vec<Option<usize>>,
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub config: SynthConfig,
    pub train_x: Vec<SynthSentence>,
    pub train_y: Vec<SynthSentence>,
    pub valid: Vec<SynthSentence>,
    pub test: Vec<SynthSentence>,
    pub cipher: Cipher,
    pub classes: HashMap<String, WordClass>,
    /// X words in vocabulary order.
    pub lexicon: Vec<String>,
}

/// Token-id view of a synthetic dataset.
#[derive(Debug, Clone)]
pub struct EncodedSynth {
    pub vocab_x: Vocab,
    pub vocab_y: Vocab,
    pub train_x: Vec<Example>,
    pub train_y: Vec<Example>,
    pub valid: Vec<ParallelPair>,
    pub test: Vec<ParallelPair>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthFingerprint {
    pub train_x_text: String,
    pub train_y_text: String,
    pub train_features: String,
    pub test_text: String,
}

fn hash_lines<'a, I: IntoIterator<Item = &'a Vec<String>>>(lines: I) -> String {
    let mut h = Sha256::new();
    for line in lines {
        h.update(line.join(" ").as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

impl SynthData {
    pub fn vocab(&self, lang: Lang) -> Result<Vocab> {
        match lang {
            Lang::X => Vocab::from_tokens(self.lexicon.iter().cloned()),
            Lang::Y => Vocab::from_tokens(self.lexicon.iter().map(|w| {
                self.cipher
                    .encrypt(w)
                    .expect("lexicon words are enciphered")
                    .to_string()
            })),
        }
    }

    pub fn encode(&self) -> Result<EncodedSynth> {
        let vocab_x = self.vocab(Lang::X)?;
        let vocab_y = self.vocab(Lang::Y)?;
        let pairs = |set: &[SynthSentence]| -> Result<Vec<ParallelPair>> {
            set.iter()
                .map(|s| {
                    Ok(ParallelPair {
                        x: vocab_x.encode(Lang::X, &s.x)?,
                        y: vocab_y.encode(Lang::Y, &s.y)?,
                        image: Some(s.image.clone()),
                    })
                })
                .collect()
        };
        let train_x = self
            .train_x
            .iter()
            .map(|s| {
                Ok(Example::with_image(
                    vocab_x.encode(Lang::X, &s.x)?,
                    s.image.clone(),
                ))
            })
            .collect::<Result<_>>()?;
        let train_y = self
            .train_y
            .iter()
            .map(|s| {
                Ok(Example::with_image(
                    vocab_y.encode(Lang::Y, &s.y)?,
                    s.image.clone(),
                ))
            })
            .collect::<Result<_>>()?;
        Ok(EncodedSynth {
            valid: pairs(&self.valid)?,
            test: pairs(&self.test)?,
            vocab_x,
            vocab_y,
            train_x,
            train_y,
        })
    }

    pub fn fingerprint(&self) -> SynthFingerprint {
        let mut feats = Sha256::new();
        for s in self.train_x.iter().chain(&self.train_y) {
            for &v in s.image.data() {
                feats.update((v as f32).to_le_bytes());
            }
        }
        SynthFingerprint {
            train_x_text: hash_lines(self.train_x.iter().map(|s| &s.x)),
            train_y_text: hash_lines(self.train_y.iter().map(|s| &s.y)),
            train_features: hex::encode(feats.finalize()),
            test_text: hash_lines(self.test.iter().map(|s| &s.x)),
        }
    }
}

fn invented_forms<R: Rng + ?Sized>(count: usize, rng: &mut R) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let syllables = rng.random_range(1..=2);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
            w.push_str(VOWELS[rng.random_range(0..VOWELS.len())]);
        }
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

struct Lexicon {
    nouns: Vec<&'static str>,
    adjectives: Vec<&'static str>,
    verbs: Vec<&'static str>,
}

/// Draws `DET [ADJ] NOUN VERB [DET [ADJ] NOUN] .` as (word, class) pairs.
fn sample_x<R: Rng + ?Sized>(
    cfg: &SynthConfig,
    lex: &Lexicon,
    rng: &mut R,
) -> Vec<(&'static str, WordClass)> {
    let mut out = Vec::with_capacity(8);
    let noun_phrase = |out: &mut Vec<(&'static str, WordClass)>, rng: &mut R| {
        out.push((FUNCTION_WORDS[rng.random_range(0..2)], WordClass::Function));
        if rng.random::<f64>() < cfg.p_adjective {
            out.push((
                lex.adjectives[rng.random_range(0..lex.adjectives.len())],
                WordClass::Adjective,
            ));
        }
        out.push((
            lex.nouns[rng.random_range(0..lex.nouns.len())],
            WordClass::Noun,
        ));
    };
    noun_phrase(&mut out, rng);
    out.push((
        lex.verbs[rng.random_range(0..lex.verbs.len())],
        WordClass::Verb,
    ));
    if rng.random::<f64>() < cfg.p_object {
        noun_phrase(&mut out, rng);
    }
    out.push((FUNCTION_WORDS[2], WordClass::Function));
    out
}

/// Y word order: adjectives follow their noun.
fn reorder_for_y<T: Copy>(tagged: &[(T, WordClass)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..tagged.len()).collect();
    let mut i = 0;
    while i + 1 < order.len() {
        if tagged[order[i]].1 == WordClass::Adjective && tagged[order[i + 1]].1 == WordClass::Noun {
            order.swap(i, i + 1);
            i += 2;
        } else {
            i += 1;
        }
    }
    order
}

/// Generates the two monolingual training corpora, held-out parallel
/// sets, and one pseudo-image per sentence.
///
/// Every content word owns a random `d_img` pattern. The `j`-th content word
/// of a sentence writes its pattern into cell `j mod k`; every entry then
/// gets Gaussian noise. Sentences are distinct across all splits.
pub fn gen_synthetic<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Result<SynthData> {
    cfg.validate()?;
    let lex = Lexicon {
        nouns: NOUNS[..cfg.n_nouns].to_vec(),
        adjectives: ADJECTIVES[..cfg.n_adjectives].to_vec(),
        verbs: VERBS[..cfg.n_verbs].to_vec(),
    };
    let mut classes = HashMap::new();
    for w in FUNCTION_WORDS {
        classes.insert(w.to_string(), WordClass::Function);
    }
    for (words, class) in [
        (&lex.nouns, WordClass::Noun),
        (&lex.adjectives, WordClass::Adjective),
        (&lex.verbs, WordClass::Verb),
    ] {
        for w in words {
            classes.insert(w.to_string(), class);
        }
    }
    let mut x_words: Vec<&str> = FUNCTION_WORDS.to_vec();
    x_words.extend(lex.nouns.iter().chain(&lex.adjectives).chain(&lex.verbs));

    let mut y_forms = invented_forms(x_words.len() - 1, rng);
    y_forms.shuffle(rng);
    let mut forward = HashMap::new();
    let mut inverse = HashMap::new();
    let mut forms = y_forms.into_iter();
    for xw in &x_words {
        let yw = if *xw == "." {
            ".".to_string()
        } else {
            forms.next().expect("one form per word")
        };
        forward.insert(xw.to_string(), yw.clone());
        inverse.insert(yw, xw.to_string());
    }
    let cipher = Cipher { forward, inverse };

    let d_img = cfg.d_img;
    let k = cfg.k_img();
    let mut patterns: HashMap<&str, Vec<f64>> = HashMap::new();
    for w in &x_words[FUNCTION_WORDS.len()..] {
        let p: Vec<f64> = (0..d_img).map(|_| StandardNormal.sample(rng)).collect();
        patterns.insert(w, p);
    }

    let pool_size = if cfg.overlap {
        cfg.n_samples
    } else {
        2 * cfg.n_samples
    };
    let total = pool_size + cfg.n_valid + cfg.n_test;
    let mut seen = HashSet::new();
    let mut sentences = Vec::with_capacity(total);
    let mut attempts = 0usize;
    while sentences.len() < total {
        attempts += 1;
        if attempts > 200 * total + 10_000 {
            return Err(Error::Config(
                "grammar cannot produce enough distinct sentences for this configuration".into(),
            ));
        }
        let tagged = sample_x(cfg, &lex, rng);
        if tagged.len() < cfg.min_len || tagged.len() > cfg.max_len {
            continue;
        }
        let x: Vec<String> = tagged.iter().map(|(w, _)| w.to_string()).collect();
        if !seen.insert(x.clone()) {
            continue;
        }
        let mut cells_x = Vec::with_capacity(x.len());
        let mut data = vec![0.0; k * d_img];
        let mut slot = 0;
        for (w, class) in &tagged {
            if *class == WordClass::Function {
                cells_x.push(None);
                continue;
            }
            let cell = slot % k;
            slot += 1;
            cells_x.push(Some(cell));
            for (d, p) in data[cell * d_img..(cell + 1) * d_img]
                .iter_mut()
                .zip(&patterns[w])
            {
                *d += p;
            }
        }
        for d in &mut data {
            let n: f64 = StandardNormal.sample(rng);
            *d = (*d + cfg.noise_std * n) as f32 as f64;
        }
        let image = Arc::new(ImageFeatureGrid::new(Tensor::new(k, d_img, data)?)?);
        let order = reorder_for_y(&tagged);
        let y = order
            .iter()
            .map(|&i| cipher.forward[&x[i]].clone())
            .collect();
        let cells_y = order.iter().map(|&i| cells_x[i]).collect();
        sentences.push(SynthSentence {
            x,
            y,
            image,
            cells_x,
            cells_y,
        });
    }

    let test = sentences.split_off(total - cfg.n_test);
    let valid = sentences.split_off(pool_size);
    let (train_x, train_y) = if cfg.overlap {
        (sentences.clone(), sentences)
    } else {
        let second = sentences.split_off(cfg.n_samples);
        (sentences, second)
    };
    Ok(SynthData {
        config: cfg.clone(),
        train_x,
        train_y,
        valid,
        test,
        cipher,
        classes,
        lexicon: x_words.iter().map(|w| w.to_string()).collect(),
    })
}
