//! Word-level vocabulary and the two sequence encodings.
//!
//! Text is lowercased and split on every character that is not alphanumeric.
//! Ids 0..5 are reserved for `<pad>`, `<bos>`, `<eos>`, `<unk>`, `<cls>`.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const CLS: usize = 4;
pub const RESERVED: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<cls>"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// `<bos> w1 .. wn <eos>`, input to the captioning decoder.
    Generative,
    /// `w1 .. wn <cls>`, input to the unimodal text encoder.
    Contrastive,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

/// Builds a vocabulary of at most `max_size` entries (reserved ids included),
/// most frequent words first, ties in lexicographic order.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::Vocab("empty corpus".into()));
    }
    if max_size < RESERVED.len() {
        return Err(Error::Vocab(format!(
            "max_size {max_size} leaves no room for the {} reserved tokens",
            RESERVED.len()
        )));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for text in corpus {
        for w in words(text.as_ref()) {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size - RESERVED.len());
    Vocabulary::from_tokens(
        RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(w, _)| w))
            .collect(),
    )
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Vocab(format!("reserved block must be {}", RESERVED.join(" "))));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::Vocab(format!("empty token at id {i}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Vocab(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Encodes `text`, keeping the prefix when the result would exceed
    /// `max_len` so that the terminal `<eos>`/`<cls>` always survives.
    pub fn encode(&self, text: &str, mode: Mode, max_len: usize) -> Vec<usize> {
        let ids = words(text).map(|w| self.id(&w).unwrap_or(UNK));
        match mode {
            Mode::Generative => {
                let mut out = vec![BOS];
                out.extend(ids.take(max_len.saturating_sub(2)));
                out.push(EOS);
                out
            }
            Mode::Contrastive => {
                let mut out: Vec<usize> = ids.take(max_len.saturating_sub(1)).collect();
                out.push(CLS);
                out
            }
        }
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            let tok = self
                .token(id)
                .ok_or_else(|| Error::Vocab(format!("id {id} outside vocabulary of {}", self.len())))?;
            match id {
                PAD | BOS | EOS | CLS => {}
                _ => out.push(tok),
            }
        }
        Ok(out.join(" "))
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}
