//! Character-level text tokenizer.
//!
//! Ids 0, 1 and 2 are reserved for padding, end-of-sequence and unknown
//! characters; the remaining ids cover the lower-cased character inventory of
//! the training transcripts in codepoint order.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{MelleError, Result};

pub const PAD: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;
const RESERVED: [&str; 3] = ["<pad>", "<eos>", "<unk>"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<char>,
    index: HashMap<char, usize>,
}

/// Token ids terminated by exactly one [`EOS`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence(Vec<usize>);

impl TokenSequence {
    pub fn from_ids(ids: Vec<usize>) -> Result<Self> {
        let eos_count = ids.iter().filter(|&&i| i == EOS).count();
        if ids.last() != Some(&EOS) || eos_count != 1 {
            return Err(MelleError::InvalidInput(
                "token sequence must end with exactly one EOS".into(),
            ));
        }
        if ids.contains(&PAD) {
            return Err(MelleError::InvalidInput("token sequence contains PAD".into()));
        }
        Ok(Self(ids))
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    /// Number of ids including the trailing EOS.
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Ids without the trailing EOS.
    pub fn content(&self) -> &[usize] {
        &self.0[..self.0.len() - 1]
    }

    /// `self ++ other` with a single EOS at the very end.
    pub fn concat(&self, other: &TokenSequence) -> TokenSequence {
        let mut ids = self.content().to_vec();
        ids.extend_from_slice(other.ids());
        TokenSequence(ids)
    }
}

fn normalize(text: &str) -> impl Iterator<Item = char> + '_ {
    text.chars().flat_map(char::to_lowercase)
}

impl Vocab {
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(MelleError::InvalidInput("cannot build a vocabulary from an empty corpus".into()));
        }
        let chars: BTreeSet<char> = corpus
            .iter()
            .flat_map(|line| normalize(line.as_ref()).collect::<Vec<_>>())
            .filter(|c| *c != '\n' && *c != '\r')
            .collect();
        Ok(Self::from_symbols(chars.into_iter().collect()))
    }

    fn from_symbols(symbols: Vec<char>) -> Self {
        let index = symbols
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i + RESERVED.len()))
            .collect();
        Self { symbols, index }
    }

    /// Total id count including the reserved ids.
    pub fn len(&self) -> usize {
        self.symbols.len() + RESERVED.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn symbol(&self, id: usize) -> Option<char> {
        id.checked_sub(RESERVED.len()).and_then(|i| self.symbols.get(i).copied())
    }

    pub fn encode(&self, text: &str) -> TokenSequence {
        let mut ids: Vec<usize> = normalize(text).map(|c| self.id(c).unwrap_or(UNK)).collect();
        ids.push(EOS);
        TokenSequence(ids)
    }

    /// Inverse of [`Vocab::encode`]; stops at EOS, skips PAD, renders UNK as U+FFFD.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            match id {
                EOS => break,
                PAD => {}
                UNK => out.push('\u{FFFD}'),
                _ => out.push(self.symbol(id).unwrap_or('\u{FFFD}')),
            }
        }
        out
    }

    /// One symbol per line: the three reserved literals, then id 3, 4, ...
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for r in RESERVED {
            s.push_str(r);
            s.push('\n');
        }
        for c in &self.symbols {
            s.push(*c);
            s.push('\n');
        }
        s
    }

    pub fn parse(contents: &str) -> Result<Self> {
        let lines: Vec<&str> = contents.split('\n').collect();
        let lines = match lines.last() {
            Some(&"") => &lines[..lines.len() - 1],
            _ => &lines[..],
        };
        if lines.len() < RESERVED.len() || lines[..RESERVED.len()] != RESERVED {
            return Err(MelleError::Format(
                "vocab file must start with <pad>, <eos>, <unk>".into(),
            ));
        }
        let mut symbols = Vec::new();
        for (n, line) in lines[RESERVED.len()..].iter().enumerate() {
            let mut it = line.chars();
            match (it.next(), it.next()) {
                (Some(c), None) => symbols.push(c),
                _ => {
                    return Err(MelleError::Format(format!(
                        "vocab line {}: expected a single character, got {line:?}",
                        n + RESERVED.len() + 1
                    )))
                }
            }
        }
        let unique: BTreeSet<char> = symbols.iter().copied().collect();
        if unique.len() != symbols.len() {
            return Err(MelleError::Format("vocab file repeats a symbol".into()));
        }
        Ok(Self::from_symbols(symbols))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_file_string()).map_err(|e| MelleError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| MelleError::io(path, e))?;
        Self::parse(&s)
    }
}
