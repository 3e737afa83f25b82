use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogEntry {
    Step {
        step: usize,
        loss: f64,
        /// Named loss components (`contrastive`, `generative`, `rank`).
        components: BTreeMap<String, f64>,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        tau: Option<f64>,
        lr: f64,
    },
    Eval {
        step: usize,
        metrics: BTreeMap<String, f64>,
    },
}

impl LogEntry {
    pub fn step(&self) -> usize {
        match self {
            LogEntry::Step { step, .. } | LogEntry::Eval { step, .. } => *step,
        }
    }
}

/// Append-only run log. Step entries must have strictly increasing step
/// indices; an eval entry may share the index of the preceding step.
#[derive(Debug, Default)]
pub struct RunLog {
    entries: Vec<LogEntry>,
    sink: Option<BufWriter<File>>,
}

impl RunLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Also appends each entry as one JSON line to `path`.
    pub fn with_file(path: &Path) -> Result<Self> {
        let f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            entries: Vec::new(),
            sink: Some(BufWriter::new(f)),
        })
    }

    pub fn push(&mut self, e: LogEntry) -> Result<()> {
        if let Some(last) = self.entries.iter().rev().find(|x| matches!(x, LogEntry::Step { .. })) {
            let ok = match e {
                LogEntry::Step { step, .. } => step > last.step(),
                LogEntry::Eval { step, .. } => step >= last.step(),
            };
            if !ok {
                return Err(Error::Invalid(format!(
                    "run log step {} does not follow {}",
                    e.step(),
                    last.step()
                )));
            }
        }
        if let Some(w) = &mut self.sink {
            let line = serde_json::to_string(&e).expect("log entries serialize");
            writeln!(w, "{line}").map_err(|err| Error::io("runlog", err))?;
            w.flush().map_err(|err| Error::io("runlog", err))?;
        }
        self.entries.push(e);
        Ok(())
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    /// `(step, loss)` of every step entry.
    pub fn losses(&self) -> Vec<(usize, f64)> {
        self.entries
            .iter()
            .filter_map(|e| match e {
                LogEntry::Step { step, loss, .. } => Some((*step, *loss)),
                LogEntry::Eval { .. } => None,
            })
            .collect()
    }

    pub fn to_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("log entries serialize") + "\n")
            .collect()
    }

    pub fn parse(text: &str) -> Result<Vec<LogEntry>> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Invalid(format!("run log line {}: {e}", i + 1))))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(s: usize) -> LogEntry {
        LogEntry::Step {
            step: s,
            loss: s as f64,
            components: BTreeMap::from([("contrastive".to_string(), 1.5)]),
            tau: Some(0.07),
            lr: 1e-3,
        }
    }

    #[test]
    fn monotone_and_round_trip() {
        let mut log = RunLog::new();
        log.push(step(1)).unwrap();
        log.push(LogEntry::Eval {
            step: 1,
            metrics: BTreeMap::from([("srcc".to_string(), 0.5)]),
        })
        .unwrap();
        log.push(step(2)).unwrap();
        assert!(log.push(step(2)).is_err());
        assert_eq!(RunLog::parse(&log.to_jsonl()).unwrap(), log.entries());
        assert_eq!(log.losses(), [(1, 1.0), (2, 2.0)]);
    }

    #[test]
    fn file_sink_appends() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.jsonl");
        let mut log = RunLog::with_file(&p).unwrap();
        log.push(step(1)).unwrap();
        drop(log);
        let mut log = RunLog::with_file(&p).unwrap();
        log.push(step(2)).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(RunLog::parse(&text).unwrap(), [step(1), step(2)]);
    }
}
