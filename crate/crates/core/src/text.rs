//! Word-level tokenization and vocabulary.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const SEP: u32 = 4;

/// Reserved tokens; their position is their id.
pub const RESERVED_TOKENS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<sep>"];

/// Meta-knowledge prefix tokens, always present in every vocabulary.
pub const META_TOKENS: [&str; 11] = [
    "<1th-entity>",
    "<2th-entity>",
    "<3th-entity>",
    "<4th-entity>",
    "<5th-entity>",
    "<other-entity>",
    "<low-confidence>",
    "<mid-confidence>",
    "<high-confidence>",
    "<old-entity>",
    "<new-entity>",
];

fn special_at(s: &str) -> Option<&'static str> {
    RESERVED_TOKENS
        .iter()
        .chain(META_TOKENS.iter())
        .find(|t| s.starts_with(**t))
        .copied()
}

/// Lowercases and splits on whitespace and punctuation. Runs of
/// alphanumerics (and `_`) form words; every other visible character is a
/// token of its own. Registered special tokens are kept whole.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut tokens = Vec::new();
    let mut word = String::new();
    let mut rest = lower.as_str();
    while let Some(c) = rest.chars().next() {
        if c == '<' {
            if let Some(special) = special_at(rest) {
                if !word.is_empty() {
                    tokens.push(std::mem::take(&mut word));
                }
                tokens.push(special.to_string());
                rest = &rest[special.len()..];
                continue;
            }
        }
        if c.is_alphanumeric() || c == '_' {
            word.push(c);
        } else {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            if !c.is_whitespace() {
                tokens.push(c.to_string());
            }
        }
        rest = &rest[c.len_utf8()..];
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// Canonical text form: tokens joined by single spaces.
pub fn normalize_text(text: &str) -> String {
    tokenize(text).join(" ")
}

/// Which end of a sequence survives truncation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Keep {
    Prefix,
    Suffix,
}

pub fn truncate<T: Clone>(seq: &[T], max_len: usize, keep: Keep) -> Vec<T> {
    if seq.len() <= max_len {
        return seq.to_vec();
    }
    match keep {
        Keep::Prefix => seq[..max_len].to_vec(),
        Keep::Suffix => seq[seq.len() - max_len..].to_vec(),
    }
}

/// Length caps applied when building model inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LengthLimits {
    pub retriever_input: usize,
    pub context: usize,
    pub entity: usize,
    pub output: usize,
}

impl Default for LengthLimits {
    fn default() -> Self {
        LengthLimits {
            retriever_input: 128,
            context: 200,
            entity: 100,
            output: 64,
        }
    }
}

/// Token/id mapping. Ids 0..4 are reserved, followed by the meta-knowledge
/// tokens, forced tokens, and corpus tokens in lexicographic order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from raw texts. Tokens seen fewer than
    /// `min_count` times are left out (and encode to UNK); `forced` tokens
    /// are always included.
    pub fn build<'a, I>(corpus: I, forced: &[String], min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut seen_any = false;
        for text in corpus {
            seen_any = true;
            for tok in tokenize(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if !seen_any {
            return Err(Error::Input(
                "cannot build a vocabulary from an empty corpus".into(),
            ));
        }
        let mut vocab = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED_TOKENS.iter().chain(META_TOKENS.iter()) {
            vocab.push(t);
        }
        for f in forced {
            for t in tokenize(f) {
                vocab.push(&t);
            }
        }
        for (tok, n) in counts {
            if n >= min_count {
                vocab.push(&tok);
            }
        }
        Ok(vocab)
    }

    fn push(&mut self, tok: &str) {
        if !self.index.contains_key(tok) {
            self.index.insert(tok.to_string(), self.tokens.len() as u32);
            self.tokens.push(tok.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens
            .get(id as usize)
            .map_or(RESERVED_TOKENS[UNK as usize], String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn encode_truncated(&self, text: &str, max_len: usize, keep: Keep) -> Vec<u32> {
        truncate(&self.encode(text), max_len, keep)
    }

    /// Joins tokens with single spaces, dropping PAD, BOS and EOS.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD && i != BOS && i != EOS)
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let mut vocab = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() || vocab.index.contains_key(line) {
                return Err(Error::Input(format!(
                    "{}: line {} is empty or duplicated",
                    path.display(),
                    i + 1
                )));
            }
            vocab.push(line);
        }
        for (i, t) in RESERVED_TOKENS.iter().enumerate() {
            if vocab.tokens.get(i).map(String::as_str) != Some(*t) {
                return Err(Error::Input(format!(
                    "{}: reserved token {t} must be on line {}",
                    path.display(),
                    i + 1
                )));
            }
        }
        Ok(vocab)
    }
}
