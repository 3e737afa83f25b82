//! Converters from AVA-style metadata into manifest records.
//!
//! Inputs understood:
//! - score list: whitespace-separated rows `index image_id n1 .. n10 ...`
//!   where `n1..n10` are vote counts for scores 1..10;
//! - caption json: `{"images": [{"filename": ..., "sentences": [{"raw": ...}]}]}`;
//! - style lists: one image id per line, with a parallel label file whose rows
//!   hold 14 zero/one columns.
//!
//! Images are expected as `<image_dir>/<image_id>.png` (JPEG is not decoded).

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::Deserialize;

use super::manifest::{ManifestRecord, NUM_STYLES};
use crate::error::{Error, Result};

fn fail(source: &str, line: usize, msg: impl Into<String>) -> Error {
    Error::Manifest {
        path: PathBuf::from(source),
        line,
        msg: msg.into(),
    }
}

/// Vote-weighted mean score per image id.
pub fn parse_scores(text: &str) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.is_empty() {
            continue;
        }
        if cols.len() < 12 {
            return Err(fail(
                "scores",
                i + 1,
                format!("expected at least 12 columns, got {}", cols.len()),
            ));
        }
        let mut votes = 0.0;
        let mut total = 0.0;
        for (k, c) in cols[2..12].iter().enumerate() {
            let n: f64 = c
                .parse()
                .map_err(|_| fail("scores", i + 1, format!("bad vote count {c:?}")))?;
            votes += n;
            total += n * (k + 1) as f64;
        }
        if votes <= 0.0 {
            return Err(fail("scores", i + 1, "image has no votes"));
        }
        out.insert(cols[1].to_string(), total / votes);
    }
    Ok(out)
}

#[derive(Deserialize)]
struct CaptionFile {
    images: Vec<CaptionImage>,
}

#[derive(Deserialize)]
struct CaptionImage {
    filename: String,
    sentences: Vec<Sentence>,
}

#[derive(Deserialize)]
struct Sentence {
    raw: String,
}

/// Comments per image id (the filename without extension).
pub fn parse_captions(json: &str) -> Result<BTreeMap<String, Vec<String>>> {
    let file: CaptionFile = serde_json::from_str(json).map_err(|e| fail("captions", e.line(), e.to_string()))?;
    let mut out = BTreeMap::new();
    for img in file.images {
        let id = img
            .filename
            .rsplit_once('.')
            .map_or(img.filename.as_str(), |(s, _)| s)
            .to_string();
        let comments: Vec<String> = img
            .sentences
            .into_iter()
            .map(|s| s.raw.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        out.entry(id).or_insert_with(Vec::new).extend(comments);
    }
    Ok(out)
}

/// Style label lists per image id from an id list and a one-hot label matrix.
pub fn parse_styles(ids: &str, labels: &str) -> Result<BTreeMap<String, Vec<u8>>> {
    let ids: Vec<&str> = ids.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    let rows: Vec<&str> = labels.lines().filter(|l| !l.trim().is_empty()).collect();
    if ids.len() != rows.len() {
        return Err(fail(
            "styles",
            0,
            format!("{} ids but {} label rows", ids.len(), rows.len()),
        ));
    }
    let mut out = BTreeMap::new();
    for (i, (id, row)) in ids.iter().zip(&rows).enumerate() {
        let cols: Vec<&str> = row.split_whitespace().collect();
        if cols.len() != NUM_STYLES as usize {
            return Err(fail(
                "styles",
                i + 1,
                format!("expected {NUM_STYLES} columns, got {}", cols.len()),
            ));
        }
        let mut set = Vec::new();
        for (k, c) in cols.iter().enumerate() {
            match *c {
                "0" => {}
                "1" => set.push(k as u8),
                other => return Err(fail("styles", i + 1, format!("label {other:?} is not 0 or 1"))),
            }
        }
        out.insert(id.to_string(), set);
    }
    Ok(out)
}

/// Joins the available sources on image id. The id set is the union of all
/// sources; fields absent from a source stay empty.
pub fn merge(
    image_dir: &str,
    scores: &BTreeMap<String, f64>,
    captions: &BTreeMap<String, Vec<String>>,
    styles: &BTreeMap<String, Vec<u8>>,
) -> Vec<ManifestRecord> {
    let mut ids: Vec<&String> = scores.keys().chain(captions.keys()).chain(styles.keys()).collect();
    ids.sort();
    ids.dedup();
    ids.into_iter()
        .map(|id| ManifestRecord {
            id: id.clone(),
            image: PathBuf::from(image_dir).join(format!("{id}.png")),
            comments: captions.get(id).cloned().unwrap_or_default(),
            mos: scores.get(id).copied(),
            styles: styles.get(id).cloned(),
        })
        .collect()
}
