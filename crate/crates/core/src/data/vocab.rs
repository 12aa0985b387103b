use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
/// Number of reserved ids preceding ordinary tokens.
pub const RESERVED: u32 = 4;

const RESERVED_TOKENS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tokenization {
    Char,
    Whitespace,
}

impl FromStr for Tokenization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "char" => Ok(Self::Char),
            "whitespace" | "word" => Ok(Self::Whitespace),
            other => Err(Error::Config(format!("unknown tokenization {other:?}"))),
        }
    }
}

impl fmt::Display for Tokenization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Char => "char",
            Self::Whitespace => "whitespace",
        })
    }
}

/// Bidirectional token/id map with the four reserved ids in front.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    mode: Tokenization,
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary ordered by descending frequency, ties broken
    /// lexicographically. Tokens seen fewer than `min_count` times are dropped.
    pub fn build<S: AsRef<str>>(lines: &[S], mode: Tokenization, min_count: usize) -> Result<Self> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut seen_any = false;
        for line in lines {
            for tok in tokenize(line.as_ref(), mode) {
                seen_any = true;
                *counts.entry(tok.to_string()).or_default() += 1;
            }
        }
        if !seen_any {
            return Err(Error::Input("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut entries: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count.max(1) && !RESERVED_TOKENS.contains(&t.as_str()))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(entries.into_iter().map(|(t, _)| t), mode)
    }

    /// Vocabulary from an ordered list of ordinary tokens.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>, mode: Tokenization) -> Result<Self> {
        let mut all: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, u32> = all.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        for t in tokens {
            if index.contains_key(&t) {
                return Err(Error::Input(format!("duplicate vocabulary token {t:?}")));
            }
            index.insert(t.clone(), all.len() as u32);
            all.push(t);
        }
        Ok(Self {
            mode,
            tokens: all,
            index,
        })
    }

    /// Vocabulary for the synthetic tasks: `size` ids where ordinary ids are
    /// spelled `s4`, `s5`, ...
    pub fn synthetic(size: usize) -> Result<Self> {
        if size <= RESERVED as usize {
            return Err(Error::Config(format!(
                "synthetic vocabulary needs more than {RESERVED} ids, got {size}"
            )));
        }
        Self::from_tokens(
            (RESERVED as usize..size).map(|i| format!("s{i}")),
            Tokenization::Whitespace,
        )
    }

    pub fn mode(&self) -> Tokenization {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    /// Ordinary tokens in id order, reserved entries excluded.
    pub fn ordinary_tokens(&self) -> &[String] {
        &self.tokens[RESERVED as usize..]
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text, self.mode).map(|t| self.id(t)).collect()
    }

    /// Renders ids as text. PAD and BOS are skipped, decoding stops at EOS.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut parts: Vec<&str> = Vec::with_capacity(ids.len());
        for &id in ids {
            match id {
                PAD | BOS => continue,
                EOS => break,
                _ => parts.push(self.token(id).unwrap_or("<unk>")),
            }
        }
        match self.mode {
            Tokenization::Char => parts.concat(),
            Tokenization::Whitespace => parts.join(" "),
        }
    }

    /// One token per line, reserved entries excluded. Whitespace and newline
    /// tokens are escaped so every entry fits on its line.
    pub fn to_text(&self) -> String {
        let mut out = format!("# mode={}\n", self.mode);
        for t in self.ordinary_tokens() {
            out.push_str(&escape(t));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Input("empty vocabulary file".into()))?;
        let mode = header
            .strip_prefix("# mode=")
            .ok_or_else(|| Error::Input("vocabulary file lacks its mode header".into()))?
            .parse()?;
        Self::from_tokens(lines.map(unescape), mode)
    }
}

fn tokenize(text: &str, mode: Tokenization) -> Box<dyn Iterator<Item = &str> + '_> {
    match mode {
        Tokenization::Whitespace => Box::new(text.split_whitespace()),
        Tokenization::Char => Box::new(text.char_indices().map(move |(i, c)| &text[i..i + c.len_utf8()])),
    }
}

fn escape(t: &str) -> String {
    t.replace('\\', "\\\\")
        .replace('\n', "\\n")
        .replace('\t', "\\t")
        .replace('\r', "\\r")
}

fn unescape(t: &str) -> String {
    let mut out = String::with_capacity(t.len());
    let mut chars = t.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('n') => out.push('\n'),
                Some('t') => out.push('\t'),
                Some('r') => out.push('\r'),
                Some(other) => out.push(other),
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn whitespace_vocab_examples() {
        let v = Vocabulary::build(&["a b", "a"], Tokenization::Whitespace, 1).unwrap();
        assert_eq!(v.ordinary_tokens(), &["a".to_string(), "b".to_string()]);
        assert_eq!(v.id("a"), 4);
        let v = Vocabulary::build(&["a b", "a"], Tokenization::Whitespace, 2).unwrap();
        assert_eq!(v.ordinary_tokens(), &["a".to_string()]);
    }

    #[test]
    fn ordering_is_frequency_then_lexicographic() {
        let v = Vocabulary::build(&["c b a b c"], Tokenization::Whitespace, 1).unwrap();
        assert_eq!(v.ordinary_tokens(), &["b", "c", "a"].map(String::from));
        let again = Vocabulary::build(&["c b a b c"], Tokenization::Whitespace, 1).unwrap();
        assert_eq!(v, again);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let err = Vocabulary::build(&["", "  "], Tokenization::Whitespace, 1).unwrap_err();
        assert_eq!(err.code(), "E_INPUT");
    }

    #[test]
    fn encode_decode_roundtrip() {
        let v = Vocabulary::build(&["hello world"], Tokenization::Char, 1).unwrap();
        assert_eq!(v.decode(&v.encode("low hello")), "low hello");
        assert_eq!(v.encode("z"), vec![UNK]);
        assert!(v.encode("").is_empty());

        let w = Vocabulary::build(&["the cat sat"], Tokenization::Whitespace, 1).unwrap();
        assert_eq!(w.decode(&w.encode("sat the cat")), "sat the cat");
        assert_eq!(w.encode("dog"), vec![UNK]);
    }

    #[test]
    fn text_roundtrip_keeps_awkward_tokens() {
        let v = Vocabulary::build(&["a b\\\tc\nd"], Tokenization::Char, 1).unwrap();
        let back = Vocabulary::from_text(&v.to_text()).unwrap();
        assert_eq!(v, back);
    }

    #[test]
    fn synthetic_vocab_has_requested_size() {
        let v = Vocabulary::synthetic(30).unwrap();
        assert_eq!(v.len(), 30);
        assert_eq!(v.token(4), Some("s4"));
        assert!(Vocabulary::synthetic(4).is_err());
    }
}
