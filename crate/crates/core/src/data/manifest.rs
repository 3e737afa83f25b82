use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_STYLES: u8 = 14;

/// One image and its annotations. `image` is relative to the manifest's
/// directory unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub image: PathBuf,
    #[serde(default)]
    pub comments: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mos: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub styles: Option<Vec<u8>>,
}

impl ManifestRecord {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if let Some(m) = self.mos {
            if !(1.0..=10.0).contains(&m) {
                return Err(format!("record {}: mos {m} outside [1, 10]", self.id));
            }
        }
        if let Some(s) = &self.styles {
            if let Some(bad) = s.iter().find(|&&c| c >= NUM_STYLES) {
                return Err(format!("record {}: style label {bad} outside [0, 13]", self.id));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub dir: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let records = parse_manifest(&text).map_err(|(line, msg)| Error::Manifest {
            path: path.to_path_buf(),
            line,
            msg,
        })?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { dir, records })
    }

    pub fn image_path(&self, r: &ManifestRecord) -> PathBuf {
        self.dir.join(&r.image)
    }

    /// Every record has at least one comment.
    pub fn require_comments(&self) -> Result<()> {
        match self.records.iter().find(|r| r.comments.is_empty()) {
            Some(r) => Err(Error::Record {
                id: r.id.clone(),
                msg: "no comments; pretraining needs at least one".into(),
            }),
            None => Ok(()),
        }
    }

    pub fn require_mos(&self, task: &str) -> Result<Vec<f64>> {
        self.records
            .iter()
            .map(|r| {
                r.mos.ok_or_else(|| Error::Task {
                    task: task.into(),
                    msg: format!("record {} has no mos label", r.id),
                })
            })
            .collect()
    }

    pub fn require_styles(&self, task: &str) -> Result<Vec<&[u8]>> {
        self.records
            .iter()
            .map(|r| {
                r.styles.as_deref().ok_or_else(|| Error::Task {
                    task: task.into(),
                    msg: format!("record {} has no style labels", r.id),
                })
            })
            .collect()
    }
}

/// Parses JSON-lines records; blank lines are skipped. Errors carry the
/// 1-based line number.
pub fn parse_manifest(text: &str) -> std::result::Result<Vec<ManifestRecord>, (usize, String)> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: ManifestRecord = serde_json::from_str(line).map_err(|e| (i + 1, e.to_string()))?;
        r.validate().map_err(|m| (i + 1, m))?;
        if !seen.insert(r.id.clone()) {
            return Err((i + 1, format!("duplicate id {}", r.id)));
        }
        out.push(r);
    }
    Ok(out)
}

pub fn to_jsonl(records: &[ManifestRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("records serialize"));
        s.push('\n');
    }
    s
}
