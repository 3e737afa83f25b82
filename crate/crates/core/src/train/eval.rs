use std::collections::BTreeMap;
use std::str::FromStr;

use aesvl_autograd::{Real, Tensor};
use serde::{Deserialize, Serialize};

use super::adapt::embed_dataset;
use crate::config::Config;
use crate::data::{Dataset, NUM_STYLES};
use crate::error::{Error, Result};
use crate::metrics::{average_precision, bleu_n, cider, plcc, rouge_l, srcc};
use crate::model::{generate_caption, ParamStore};
use crate::objectives::AdapterState;
use crate::prompts::PromptBank;
use crate::tokenizer::Vocabulary;
use crate::zsl::{zsl_iaa_ensemble, zsl_iaa_single, zsl_style_scores, PromptCache};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    Iaa,
    ZslIaa,
    ZslStyle,
    Caption,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Iaa => "iaa",
            Task::ZslIaa => "zsl-iaa",
            Task::ZslStyle => "zsl-style",
            Task::Caption => "caption",
        }
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "iaa" => Ok(Task::Iaa),
            "zsl-iaa" => Ok(Task::ZslIaa),
            "zsl-style" => Ok(Task::ZslStyle),
            "caption" => Ok(Task::Caption),
            other => Err(Error::Invalid(format!(
                "unknown task {other:?} (expected iaa, zsl-iaa, zsl-style or caption)"
            ))),
        }
    }
}

/// Parses a comma-separated task list, dropping duplicates.
pub fn parse_tasks(list: &str) -> Result<Vec<Task>> {
    let mut t = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(Task::from_str)
        .collect::<Result<Vec<_>>>()?;
    t.sort();
    t.dedup();
    if t.is_empty() {
        return Err(Error::Invalid("empty task list".into()));
    }
    Ok(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub srcc: f64,
    pub plcc: f64,
}

impl Correlation {
    pub fn of(pred: &[f64], label: &[f64]) -> Result<Self> {
        Ok(Self {
            srcc: srcc(pred, label)?,
            plcc: plcc(pred, label)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleReport {
    /// AP per style; `None` when no image carries the label.
    pub per_class: BTreeMap<String, Option<f64>>,
    /// Mean over classes with at least one positive.
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionReport {
    /// Mean sentence-level BLEU-1..4.
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub cider: f64,
    pub captions: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub images: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iaa: Option<Correlation>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zsl_iaa: Option<Correlation>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zsl_style: Option<StyleReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub caption: Option<CaptionReport>,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize") + "\n"
    }
}

fn task_err(t: Task, msg: impl Into<String>) -> Error {
    Error::Task {
        task: t.name().into(),
        msg: msg.into(),
    }
}

/// Checks that every requested task has its labels before any work starts.
fn check_labels<T: Real>(ds: &Dataset, tasks: &[Task], adapter: Option<&AdapterState<T>>) -> Result<()> {
    for &t in tasks {
        let missing = ds.records.iter().find(|r| match t {
            Task::Iaa | Task::ZslIaa => r.mos.is_none(),
            Task::ZslStyle => r.styles.is_none(),
            Task::Caption => r.comments.is_empty(),
        });
        if let Some(r) = missing {
            let what = match t {
                Task::Iaa | Task::ZslIaa => "mos label",
                Task::ZslStyle => "style labels",
                Task::Caption => "reference comments",
            };
            return Err(task_err(t, format!("record {} has no {what}", r.id)));
        }
        if t == Task::Iaa && adapter.is_none() {
            return Err(task_err(t, "needs an adapter checkpoint"));
        }
    }
    Ok(())
}

pub struct EvalInputs<'a, T: Real> {
    pub params: &'a ParamStore<T>,
    pub vocab: &'a Vocabulary,
    pub bank: &'a PromptBank,
    pub prompts: &'a PromptCache<T>,
    pub adapter: Option<&'a AdapterState<T>>,
}

fn rows_f64<T: Real>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|i| t.row(i).iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect())
        .collect()
}

/// Runs the requested tasks on `ds` (center crops, no augmentation).
pub fn evaluate<T: Real>(cfg: &Config, inp: &EvalInputs<T>, ds: &Dataset, tasks: &[Task]) -> Result<Report> {
    if ds.is_empty() {
        return Err(Error::Invalid("evaluation needs at least one record".into()));
    }
    check_labels(ds, tasks, inp.adapter)?;
    let needs_features = tasks.iter().any(|t| *t != Task::Caption);
    let feats = if needs_features {
        Some(embed_dataset(&cfg.model, inp.params, ds, &cfg.augment)?)
    } else {
        None
    };
    let mos: Vec<f64> = ds.records.iter().filter_map(|r| r.mos).collect();
    let mut report = Report {
        images: ds.len(),
        iaa: None,
        zsl_iaa: None,
        zsl_style: None,
        caption: None,
    };
    for &t in tasks {
        match t {
            Task::Iaa => {
                let adapter = inp.adapter.expect("checked above");
                let scores = adapter.scores(&feats.as_ref().expect("features").v)?;
                report.iaa = Some(Correlation::of(&scores, &mos).map_err(|e| task_err(t, e.to_string()))?);
            }
            Task::ZslIaa => {
                let pairs = inp.prompts.iaa_pairs(inp.bank)?;
                let x = rows_f64(&feats.as_ref().expect("features").x);
                let scores = x
                    .iter()
                    .map(|v| match cfg.eval.zsl_mode {
                        crate::config::ZslMode::Ensemble => zsl_iaa_ensemble(v, &pairs),
                        crate::config::ZslMode::Single => Ok(zsl_iaa_single(v, &pairs[0])),
                    })
                    .collect::<Result<Vec<_>>>()?;
                report.zsl_iaa = Some(Correlation::of(&scores, &mos).map_err(|e| task_err(t, e.to_string()))?);
            }
            Task::ZslStyle => {
                let styles = inp.prompts.styles(inp.bank)?;
                let x = rows_f64(&feats.as_ref().expect("features").x);
                let scores: Vec<Vec<f64>> = x
                    .iter()
                    .map(|v| {
                        zsl_style_scores(v, &styles, cfg.eval.zsl_mode.into())
                            .into_iter()
                            .map(|(_, s)| s)
                            .collect()
                    })
                    .collect();
                let mut per_class = BTreeMap::new();
                let mut aps = Vec::new();
                for (c, style) in styles.iter().enumerate().take(NUM_STYLES as usize) {
                    let col: Vec<f64> = scores.iter().map(|s| s[c]).collect();
                    let pos: Vec<bool> = ds
                        .records
                        .iter()
                        .map(|r| r.styles.as_ref().expect("checked above").contains(&(c as u8)))
                        .collect();
                    let ap = if pos.iter().any(|&p| p) {
                        let ap = average_precision(&col, &pos)?;
                        aps.push(ap);
                        Some(ap)
                    } else {
                        None
                    };
                    per_class.insert(style.name.clone(), ap);
                }
                if aps.is_empty() {
                    return Err(task_err(t, "no image carries any style label"));
                }
                let map = aps.iter().sum::<f64>() / aps.len() as f64;
                report.zsl_style = Some(StyleReport { per_class, map });
            }
            Task::Caption => {
                let mut captions = BTreeMap::new();
                let mut items = Vec::with_capacity(ds.len());
                let mut bleu = [0.0; 4];
                let mut rouge = 0.0;
                for (i, r) in ds.records.iter().enumerate() {
                    let image = ds.eval_images::<T>(&[i], &cfg.augment)?;
                    let ids = generate_caption(
                        &cfg.model,
                        inp.params,
                        &image,
                        cfg.eval.caption_max_len,
                        inp.vocab.len(),
                    )?;
                    let cap = inp.vocab.decode(&ids)?;
                    for (n, b) in bleu.iter_mut().enumerate() {
                        *b += bleu_n(&cap, &r.comments, n + 1)?;
                    }
                    rouge += rouge_l(&cap, &r.comments)?;
                    captions.insert(r.id.clone(), cap.clone());
                    items.push((cap, r.comments.clone()));
                }
                let n = ds.len() as f64;
                bleu.iter_mut().for_each(|b| *b /= n);
                report.caption = Some(CaptionReport {
                    bleu,
                    rouge_l: rouge / n,
                    cider: cider(&items)?.score,
                    captions,
                });
            }
        }
    }
    Ok(report)
}
