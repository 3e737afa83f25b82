use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The shipped bank, also available on disk as `data/prompts.toml`.
pub const DEFAULT_BANK: &str = include_str!("../data/prompts.toml");

/// Prompt whose frozen embedding anchors the adapter score axis.
pub const ANCHOR_PROMPT: &str = "good image";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IaaPair {
    pub aspect: String,
    pub good: String,
    pub bad: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StylePrompts {
    pub name: String,
    pub single: String,
    pub prompts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBank {
    pub iaa_pairs: Vec<IaaPair>,
    pub styles: Vec<StylePrompts>,
}

impl Default for PromptBank {
    fn default() -> Self {
        Self::from_toml(DEFAULT_BANK).expect("shipped prompt bank parses")
    }
}

impl PromptBank {
    pub fn from_toml(text: &str) -> Result<Self> {
        let bank: PromptBank = toml::from_str(text).map_err(|e| Error::Config(format!("prompt bank: {e}")))?;
        bank.validate()?;
        Ok(bank)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    fn validate(&self) -> Result<()> {
        if self.iaa_pairs.is_empty() {
            return Err(Error::Config("prompt bank: no IAA pairs".into()));
        }
        for (i, s) in self.styles.iter().enumerate() {
            if s.prompts.is_empty() {
                return Err(Error::Config(format!("prompt bank: style {:?} has no prompts", s.name)));
            }
            if self.styles[..i].iter().any(|o| o.name == s.name) {
                return Err(Error::Config(format!("prompt bank: duplicate style {:?}", s.name)));
            }
        }
        Ok(())
    }

    pub fn style_names(&self) -> Vec<&str> {
        self.styles.iter().map(|s| s.name.as_str()).collect()
    }

    /// Every distinct prompt text, anchor first, in bank order.
    pub fn texts(&self) -> Vec<&str> {
        let mut out = vec![ANCHOR_PROMPT];
        let all = self
            .iaa_pairs
            .iter()
            .flat_map(|p| [p.good.as_str(), p.bad.as_str()])
            .chain(
                self.styles
                    .iter()
                    .flat_map(|s| std::iter::once(s.single.as_str()).chain(s.prompts.iter().map(String::as_str))),
            );
        for t in all {
            if !out.contains(&t) {
                out.push(t);
            }
        }
        out
    }
}
