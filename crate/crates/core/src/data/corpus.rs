use std::path::Path;

use super::batch::Pair;
use super::vocab::Vocabulary;
use crate::error::{Error, Result};

/// Shakespeare's sonnets, one sonnet per line.
pub const BUILTIN_CORPUS: &str = include_str!("../../assets/sonnets.txt");

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Reads `source<TAB>target` lines. Blank lines are skipped.
pub fn load_parallel_tsv(path: &Path) -> Result<Vec<(String, String)>> {
    parse_parallel_tsv(&read_text(path)?, &path.display().to_string())
}

pub fn parse_parallel_tsv(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.split('\n').enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(s), Some(t), None) => out.push((s.to_string(), t.to_string())),
            _ => {
                return Err(Error::Parse {
                    path: origin.into(),
                    line: i + 1,
                    message: "expected exactly one TAB separating source and target".into(),
                })
            }
        }
    }
    Ok(out)
}

pub fn encode_pairs(lines: &[(String, String)], vocab: &Vocabulary) -> Vec<Pair> {
    lines
        .iter()
        .map(|(s, t)| Pair::new(vocab.encode(s), vocab.encode(t)))
        .collect()
}

/// Token stream of a language-modelling corpus viewed as overlapping
/// windows of `context` tokens with stride one.
#[derive(Clone, Debug, PartialEq)]
pub struct LmCorpus {
    pub ids: Vec<u32>,
    pub context: usize,
}

impl LmCorpus {
    pub fn new(text: &str, vocab: &Vocabulary, context: usize) -> Result<Self> {
        if context == 0 {
            return Err(Error::Config("context length must be positive".into()));
        }
        Ok(Self {
            ids: vocab.encode(text),
            context,
        })
    }

    pub fn len(&self) -> usize {
        (self.ids.len() + 1).saturating_sub(self.context)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn window(&self, i: usize) -> &[u32] {
        &self.ids[i..i + self.context]
    }

    pub fn windows(&self) -> impl Iterator<Item = &[u32]> {
        (0..self.len()).map(|i| self.window(i))
    }

    /// Window `i` as an example; batching adds the BOS prefix.
    pub fn pair(&self, i: usize) -> Pair {
        Pair::new(Vec::new(), self.window(i).to_vec())
    }
}
