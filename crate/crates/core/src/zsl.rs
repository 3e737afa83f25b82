//! Zero-shot aesthetic scoring and style classification from prompt embeddings.

use std::collections::BTreeMap;
use std::path::Path;

use aesvl_autograd::{Real, Tensor};
use sha2::{Digest, Sha256};

use crate::container::{self, Stored};
use crate::error::{CheckpointError, Error, Result};
use crate::model::{text_embeddings, ModelConfig, ParamStore};
use crate::prompts::{PromptBank, ANCHOR_PROMPT};
use crate::tokenizer::{Mode, Vocabulary};

const HASH_PREFIX: &str = "@checkpoint-sha256:";

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `e^a / (e^a + e^b)`, i.e. the logistic function of `a - b`.
///
/// Evaluated as `q = 1 / (1 + e^|d|)` and `1 - q` on the upper side, so that
/// swapping the arguments yields scores summing to exactly one.
pub fn pair_softmax(a: f64, b: f64) -> f64 {
    let d = a - b;
    let q = 1.0 / (1.0 + d.abs().exp());
    if d >= 0.0 {
        1.0 - q
    } else {
        q
    }
}

/// Unit prompt embeddings for one good/bad pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptPair {
    pub good: Vec<f64>,
    pub bad: Vec<f64>,
}

pub fn zsl_iaa_single(v: &[f64], pair: &PromptPair) -> f64 {
    pair_softmax(dot(v, &pair.good), dot(v, &pair.bad))
}

/// Mean of the single-pair scores.
pub fn zsl_iaa_ensemble(v: &[f64], pairs: &[PromptPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Invalid("prompt ensemble needs at least one pair".into()));
    }
    Ok(pairs.iter().map(|p| zsl_iaa_single(v, p)).sum::<f64>() / pairs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StyleMode {
    Single,
    Ensemble,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StyleEmbeddings {
    pub name: String,
    pub single: Vec<f64>,
    pub prompts: Vec<Vec<f64>>,
}

/// Raw cosine score of `v` for one style: the style-name prompt, or the mean
/// cosine over the style's prompt list.
pub fn style_score(v: &[f64], style: &StyleEmbeddings, mode: StyleMode) -> f64 {
    match mode {
        StyleMode::Single => dot(v, &style.single),
        StyleMode::Ensemble => style.prompts.iter().map(|p| dot(v, p)).sum::<f64>() / style.prompts.len() as f64,
    }
}

pub fn zsl_style_scores(v: &[f64], styles: &[StyleEmbeddings], mode: StyleMode) -> Vec<(String, f64)> {
    styles
        .iter()
        .map(|s| (s.name.clone(), style_score(v, s, mode)))
        .collect()
}

pub fn zsl_style_score(v: &[f64], styles: &[StyleEmbeddings], name: &str, mode: StyleMode) -> Result<f64> {
    let s = styles
        .iter()
        .find(|s| s.name == name)
        .ok_or_else(|| Error::Invalid(format!("unknown style {name:?}")))?;
    Ok(style_score(v, s, mode))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Frozen unit text embeddings keyed by prompt text, tied to the checkpoint
/// they were computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptCache<T: Real> {
    pub checkpoint_sha256: String,
    pub embeddings: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> PromptCache<T> {
    /// Embeds the anchor prompt and every bank prompt in one batch.
    pub fn compute(
        cfg: &ModelConfig,
        params: &ParamStore<T>,
        vocab: &Vocabulary,
        bank: &PromptBank,
        checkpoint_sha256: String,
    ) -> Result<Self> {
        let texts = bank.texts();
        let seqs: Vec<Vec<usize>> = texts
            .iter()
            .map(|t| vocab.encode(t, Mode::Contrastive, cfg.max_text_length))
            .collect();
        let y = text_embeddings(cfg, params, &seqs)?;
        let d = cfg.dim;
        let mut embeddings = BTreeMap::new();
        for (i, t) in texts.iter().enumerate() {
            embeddings.insert(t.to_string(), Tensor::new(&[d], y.row(i).to_vec())?);
        }
        Ok(Self {
            checkpoint_sha256,
            embeddings,
        })
    }

    pub fn get(&self, text: &str) -> Result<Vec<f64>> {
        let t = self
            .embeddings
            .get(text)
            .ok_or_else(|| Error::Invalid(format!("prompt {text:?} is not in the cache")))?;
        Ok(t.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect())
    }

    pub fn anchor(&self) -> Result<Tensor<T>> {
        self.embeddings
            .get(ANCHOR_PROMPT)
            .cloned()
            .ok_or_else(|| Error::Invalid("anchor prompt missing from cache".into()))
    }

    pub fn iaa_pairs(&self, bank: &PromptBank) -> Result<Vec<PromptPair>> {
        bank.iaa_pairs
            .iter()
            .map(|p| {
                Ok(PromptPair {
                    good: self.get(&p.good)?,
                    bad: self.get(&p.bad)?,
                })
            })
            .collect()
    }

    pub fn styles(&self, bank: &PromptBank) -> Result<Vec<StyleEmbeddings>> {
        bank.styles
            .iter()
            .map(|s| {
                Ok(StyleEmbeddings {
                    name: s.name.clone(),
                    single: self.get(&s.single)?,
                    prompts: s.prompts.iter().map(|p| self.get(p)).collect::<Result<_>>()?,
                })
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries: Vec<(String, Stored)> = vec![(
            format!("{HASH_PREFIX}{}", self.checkpoint_sha256),
            Stored::from_tensor(&Tensor::<T>::zeros(&[1])),
        )];
        entries.extend(self.embeddings.iter().map(|(k, t)| (k.clone(), Stored::from_tensor(t))));
        container::save(path, &entries)
    }

    /// Loads a cache, rejecting it when `expected_sha256` is given and differs.
    pub fn load(path: &Path, expected_sha256: Option<&str>) -> Result<Self> {
        let entries = container::load(path)?;
        let fail = |k| Error::checkpoint(path, k);
        let mut hash = None;
        let mut embeddings = BTreeMap::new();
        for (name, s) in &entries {
            if let Some(h) = name.strip_prefix(HASH_PREFIX) {
                hash = Some(h.to_string());
            } else {
                embeddings.insert(name.clone(), s.to_tensor(name).map_err(fail)?);
            }
        }
        let hash = hash.ok_or_else(|| fail(CheckpointError::MissingTensor(format!("{HASH_PREFIX}<hex>"))))?;
        if let Some(want) = expected_sha256 {
            if want != hash {
                return Err(Error::Invalid(format!(
                    "prompt cache {} was computed for checkpoint {hash}, not {want}",
                    path.display()
                )));
            }
        }
        Ok(Self {
            checkpoint_sha256: hash,
            embeddings,
        })
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.checkpoint_sha256 == other.checkpoint_sha256
            && self.embeddings.len() == other.embeddings.len()
            && self
                .embeddings
                .iter()
                .zip(&other.embeddings)
                .all(|((a, x), (b, y))| a == b && x.bit_eq(y))
    }
}
