//! Closed-vocabulary word tokenizer for the toy language model.
//!
//! Text splits into alphanumeric runs, single punctuation characters and
//! newlines. A piece preceded by a space carries a leading `▁`, so decoding
//! reproduces single-spaced text exactly.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";
const SPACE_MARK: char = '▁';

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Tokenizer {
    fn from(vocab: Vec<String>) -> Self {
        let index = vocab.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { vocab, index }
    }
}

impl From<Tokenizer> for Vec<String> {
    fn from(t: Tokenizer) -> Self {
        t.vocab
    }
}

/// Splits text into vocabulary pieces.
pub fn pieces(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut space = false;
    let mut word = String::new();
    let flush = |word: &mut String, space: &mut bool, out: &mut Vec<String>| {
        if !word.is_empty() {
            let piece = if *space { format!("{SPACE_MARK}{word}") } else { word.clone() };
            out.push(piece);
            word.clear();
            *space = false;
        }
    };
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.push(ch);
        } else {
            flush(&mut word, &mut space, &mut out);
            if ch == '\n' {
                out.push("\n".into());
                space = false;
            } else if ch.is_whitespace() {
                space = true;
            } else {
                let piece = if space { format!("{SPACE_MARK}{ch}") } else { ch.to_string() };
                out.push(piece);
                space = false;
            }
        }
    }
    flush(&mut word, &mut space, &mut out);
    out
}

impl Tokenizer {
    pub const PAD_ID: u32 = 0;
    pub const UNK_ID: u32 = 1;
    pub const EOS_ID: u32 = 2;

    /// Vocabulary over every piece of `corpus`, sorted after the special tokens.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<String> = corpus.into_iter().flat_map(pieces).collect();
        let mut vocab = vec![PAD.to_string(), UNK.to_string(), EOS.to_string()];
        vocab.extend(set.into_iter().filter(|p| ![PAD, UNK, EOS].contains(&p.as_str())));
        Self::from(vocab)
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        pieces(text)
            .iter()
            .map(|p| self.index.get(p).copied().unwrap_or(Self::UNK_ID))
            .collect()
    }

    /// Like [`encode`](Self::encode) but rejects pieces outside the vocabulary.
    pub fn encode_strict(&self, text: &str) -> Result<Vec<u32>> {
        pieces(text)
            .iter()
            .map(|p| {
                self.index
                    .get(p)
                    .copied()
                    .ok_or_else(|| Error::invalid(format!("token {p:?} not in vocabulary")))
            })
            .collect()
    }

    /// Decodes ids to text; special tokens are dropped.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == Self::PAD_ID || id == Self::EOS_ID {
                continue;
            }
            let tok = self.token(id).unwrap_or(UNK);
            if tok == UNK {
                out.push('?');
            } else if let Some(rest) = tok.strip_prefix(SPACE_MARK) {
                out.push(' ');
                out.push_str(rest);
            } else {
                out.push_str(tok);
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.vocab)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let vocab: Vec<String> = serde_json::from_str(text)?;
        if vocab.len() < 3 || vocab[0] != PAD || vocab[1] != UNK || vocab[2] != EOS {
            return Err(Error::invalid("vocabulary must start with <pad>, <unk>, <eos>"));
        }
        Ok(Self::from(vocab))
    }
}
