use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const NUM_SPECIALS: usize = 4;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<s>", "</s>", "<unk>"];

/// The two monolingual "languages".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Lang {
    X,
    Y,
}

impl Lang {
    pub fn other(self) -> Lang {
        match self {
            Lang::X => Lang::Y,
            Lang::Y => Lang::X,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Lang::X => "x",
            Lang::Y => "y",
        }
    }

    pub fn parse(s: &str) -> Result<Lang> {
        match s {
            "x" => Ok(Lang::X),
            "y" => Ok(Lang::Y),
            other => Err(Error::Config(format!("unknown language `{other}`"))),
        }
    }
}

impl fmt::Display for Lang {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Integer-encoded sentence without BOS/EOS.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    pub lang: Lang,
    pub ids: Vec<TokenId>,
}

impl TokenSeq {
    /// Corpus sentences must be non-empty.
    pub fn new(lang: Lang, ids: Vec<TokenId>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::EmptySentence);
        }
        Ok(Self { lang, ids })
    }

    /// Decoder output; may be empty when EOS is generated first.
    pub fn decoded(lang: Lang, ids: Vec<TokenId>) -> Self {
        Self { lang, ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    id_of: HashMap<String, TokenId>,
    token_of: Vec<String>,
}

impl Vocab {
    /// Vocabulary holding only the special tokens.
    pub fn specials_only() -> Self {
        Self::from_tokens(Vec::<String>::new()).expect("specials are unique")
    }

    /// Assigns ids from 4 upward in the given order.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocab {
            id_of: HashMap::new(),
            token_of: Vec::new(),
        };
        for tok in SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(tokens.into_iter().map(Into::into))
        {
            if vocab.id_of.contains_key(&tok) {
                return Err(Error::format(
                    "vocabulary",
                    format!("duplicate token `{tok}`"),
                ));
            }
            vocab.id_of.insert(tok.clone(), vocab.token_of.len());
            vocab.token_of.push(tok);
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.token_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_of.is_empty()
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.id_of.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<TokenId> {
        self.id_of.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.token_of.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.token_of
    }

    pub fn encode<S: AsRef<str>>(&self, lang: Lang, tokens: &[S]) -> Result<TokenSeq> {
        TokenSeq::new(lang, tokens.iter().map(|t| self.id(t.as_ref())).collect())
    }

    /// Maps ids back to strings; unknown ids become `<unk>`.
    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(SPECIAL_TOKENS[UNK]).to_string())
            .collect()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        for tok in &self.token_of {
            writeln!(w, "{tok}")?;
        }
        Ok(())
    }

    /// Reads the one-token-per-line format; the first four lines must be the
    /// special tokens.
    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let lines = r.lines().collect::<std::io::Result<Vec<_>>>()?;
        if lines.len() < NUM_SPECIALS || lines[..NUM_SPECIALS] != SPECIAL_TOKENS {
            return Err(Error::format(
                "vocabulary",
                format!("first lines must be {}", SPECIAL_TOKENS.join(" ")),
            ));
        }
        Self::from_tokens(lines.into_iter().skip(NUM_SPECIALS))
    }
}

/// Tokens occurring at least `min_freq` times, ordered by descending
/// frequency with lexicographic tie-breaking.
pub fn build_vocab<S: AsRef<str>>(corpus: &[Vec<S>], min_freq: usize) -> Result<Vocab> {
    if min_freq == 0 {
        return Err(Error::Config("min_freq must be at least 1".into()));
    }
    if corpus.iter().all(|s| s.is_empty()) {
        return Err(Error::EmptyCorpus);
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for sentence in corpus {
        for tok in sentence {
            let tok = tok.as_ref();
            if SPECIAL_TOKENS.contains(&tok) {
                continue;
            }
            *counts.entry(tok).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_freq).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Vocab::from_tokens(kept.into_iter().map(|(t, _)| t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;

    fn corpus(lines: &[&str]) -> Vec<Vec<String>> {
        lines.iter().map(|l| tokenize(l).unwrap()).collect()
    }

    #[test]
    fn frequency_order() {
        let v = build_vocab(&corpus(&["a a b"]), 1).unwrap();
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), 5);
        assert_eq!(v.len(), 6);
    }

    #[test]
    fn threshold_maps_rare_tokens_to_unk() {
        let v = build_vocab(&corpus(&["a b b"]), 2).unwrap();
        assert_eq!(v.id("a"), UNK);
        assert_eq!(v.id("b"), 4);
    }

    #[test]
    fn ties_break_lexicographically() {
        let v = build_vocab(&corpus(&["b a", "a b"]), 1).unwrap();
        assert_eq!((v.id("a"), v.id("b")), (4, 5));
    }

    #[test]
    fn specials_occupy_first_ids() {
        let v = build_vocab(&corpus(&["z"]), 1).unwrap();
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            assert_eq!(v.get(s), Some(i));
            assert_eq!(v.token(i), Some(*s));
        }
    }

    #[test]
    fn empty_corpus_and_bad_threshold() {
        assert!(matches!(
            build_vocab::<String>(&[], 1),
            Err(Error::EmptyCorpus)
        ));
        assert!(matches!(
            build_vocab(&corpus(&["a"]), 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn file_round_trip_and_validation() {
        let v = build_vocab(&corpus(&["the dog sees the cat ."]), 1).unwrap();
        let mut buf = Vec::new();
        v.write_to(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("<pad>\n<s>\n</s>\n<unk>\nthe\n"));
        assert_eq!(Vocab::read_from(&buf[..]).unwrap(), v);
        assert!(Vocab::read_from(&b"<s>\n<pad>\n</s>\n<unk>\n"[..]).is_err());
    }

    #[test]
    fn empty_sequences_rejected_for_corpus_text() {
        assert!(TokenSeq::new(Lang::X, vec![]).is_err());
        assert!(TokenSeq::decoded(Lang::X, vec![]).is_empty());
    }
}
