use crate::error::{Error, Result};

/// Whitespace tokenizer: lowercases, and peels leading/trailing punctuation
/// off each word as single-character tokens. Inner punctuation such as the
/// hyphen in `t-shirt` stays inside the word; a chunk made only of
/// punctuation is kept whole.
pub fn tokenize(text: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let lower = chunk.to_lowercase();
        let chars: Vec<char> = lower.chars().collect();
        let is_punct = |c: &char| !c.is_alphanumeric();
        if chars.iter().all(is_punct) {
            out.push(lower);
            continue;
        }
        let start = chars.iter().take_while(|c| is_punct(c)).count();
        let end = chars.len() - chars.iter().rev().take_while(|c| is_punct(c)).count();
        out.extend(chars[..start].iter().map(|c| c.to_string()));
        out.push(chars[start..end].iter().collect());
        out.extend(chars[end..].iter().map(|c| c.to_string()));
    }
    if out.is_empty() {
        return Err(Error::EmptySentence);
    }
    Ok(out)
}
