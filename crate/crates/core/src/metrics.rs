//! Correlation, ranking and caption metrics.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::tokenizer::words;

fn check_pairs(metric: &'static str, pred: &[f64], label: &[f64]) -> Result<()> {
    let err = |msg: String| Err(Error::Metric { metric, msg });
    if pred.len() != label.len() {
        return err(format!("{} predictions vs {} labels", pred.len(), label.len()));
    }
    if pred.len() < 2 {
        return err(format!("needs at least 2 items, got {}", pred.len()));
    }
    if pred.iter().chain(label).any(|v| !v.is_finite()) {
        return err("non-finite value".into());
    }
    Ok(())
}

fn pearson_unchecked(metric: &'static str, x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Metric {
            metric,
            msg: "constant input, correlation undefined".into(),
        });
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties given the mean of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn plcc(pred: &[f64], label: &[f64]) -> Result<f64> {
    check_pairs("plcc", pred, label)?;
    pearson_unchecked("plcc", pred, label)
}

pub fn srcc(pred: &[f64], label: &[f64]) -> Result<f64> {
    check_pairs("srcc", pred, label)?;
    pearson_unchecked("srcc", &average_ranks(pred), &average_ranks(label))
}

/// Mean precision at each positive, scanning by descending score; equal
/// scores keep their input order.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::Metric {
            metric: "ap",
            msg: format!("{} scores vs {} labels", scores.len(), positive.len()),
        });
    }
    let total = positive.iter().filter(|&&p| p).count();
    if total == 0 {
        return Err(Error::Metric {
            metric: "ap",
            msg: "class has no positives".into(),
        });
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut hits, mut sum) = (0usize, 0.0);
    for (rank, &i) in idx.iter().enumerate() {
        if positive[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / total as f64)
}

pub fn mean_average_precision(classes: &[(Vec<f64>, Vec<bool>)]) -> Result<f64> {
    if classes.is_empty() {
        return Err(Error::Metric {
            metric: "map",
            msg: "no classes".into(),
        });
    }
    let mut total = 0.0;
    for (s, p) in classes {
        total += average_precision(s, p)?;
    }
    Ok(total / classes.len() as f64)
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut m = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn tokenize(text: &str) -> Vec<String> {
    words(text).collect()
}

/// Sentence BLEU-n: geometric mean of clipped k-gram precisions for
/// k = 1..=n times the brevity penalty against the closest reference length
/// (the shorter one on ties).
pub fn bleu_n<S: AsRef<str>>(candidate: &str, references: &[S], n: usize) -> Result<f64> {
    if !(1..=4).contains(&n) {
        return Err(Error::Metric {
            metric: "bleu",
            msg: format!("order must be 1..=4, got {n}"),
        });
    }
    if references.is_empty() {
        return Err(Error::Metric {
            metric: "bleu",
            msg: "no references".into(),
        });
    }
    let cand = tokenize(candidate);
    if cand.is_empty() {
        log::warn!("bleu: empty candidate scores 0");
        return Ok(0.0);
    }
    let refs: Vec<Vec<String>> = references.iter().map(|r| tokenize(r.as_ref())).collect();
    let mut log_sum = 0.0;
    for k in 1..=n {
        let counts = ngram_counts(&cand, k);
        let total: usize = counts.values().sum();
        if total == 0 {
            return Ok(0.0);
        }
        let ref_counts: Vec<_> = refs.iter().map(|r| ngram_counts(r, k)).collect();
        let clipped: usize = counts
            .iter()
            .map(|(g, &c)| {
                let max_ref = ref_counts
                    .iter()
                    .map(|rc| rc.get(g).copied().unwrap_or(0))
                    .max()
                    .unwrap_or(0);
                c.min(max_ref)
            })
            .sum();
        if clipped == 0 {
            return Ok(0.0);
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let c = cand.len();
    let r = refs
        .iter()
        .map(Vec::len)
        .min_by_key(|&l| (l.abs_diff(c), l))
        .unwrap_or(0);
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * (log_sum / n as f64).exp())
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L: best LCS F1 over the references.
pub fn rouge_l<S: AsRef<str>>(candidate: &str, references: &[S]) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::Metric {
            metric: "rouge_l",
            msg: "no references".into(),
        });
    }
    let cand = tokenize(candidate);
    if cand.is_empty() {
        return Ok(0.0);
    }
    let mut best: f64 = 0.0;
    for r in references {
        let r = tokenize(r.as_ref());
        if r.is_empty() {
            continue;
        }
        let l = lcs(&cand, &r) as f64;
        if l > 0.0 {
            let (p, rec) = (l / cand.len() as f64, l / r.len() as f64);
            best = best.max(2.0 * p * rec / (p + rec));
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CiderReport {
    pub score: f64,
    pub per_image: Vec<f64>,
    /// True for a one-image corpus, where every idf weight is zero.
    pub single_image: bool,
}

/// Corpus CIDEr with 1..4-grams, idf `ln(|I| / df)` from the reference sets
/// (df floored at 1 for n-grams that only occur in candidates), cosine
/// averaged over references, mean over n, times 10.
pub fn cider<S: AsRef<str>>(items: &[(String, Vec<S>)]) -> Result<CiderReport> {
    if items.is_empty() {
        return Err(Error::Metric {
            metric: "cider",
            msg: "empty corpus".into(),
        });
    }
    if let Some((c, _)) = items.iter().find(|(_, r)| r.is_empty()) {
        return Err(Error::Metric {
            metric: "cider",
            msg: format!("no references for candidate {c:?}"),
        });
    }
    let single_image = items.len() == 1;
    if single_image {
        log::warn!("cider: single-image corpus, idf is zero for every n-gram");
    }
    let cands: Vec<Vec<String>> = items.iter().map(|(c, _)| tokenize(c)).collect();
    let refs: Vec<Vec<Vec<String>>> = items
        .iter()
        .map(|(_, r)| r.iter().map(|s| tokenize(s.as_ref())).collect())
        .collect();
    let log_images = (items.len() as f64).ln();
    let mut per_image = vec![0.0; items.len()];
    for n in 1..=4 {
        let mut df: BTreeMap<&[String], usize> = BTreeMap::new();
        for image_refs in &refs {
            let set: BTreeSet<&[String]> = image_refs.iter().flat_map(|r| ngram_counts(r, n).into_keys()).collect();
            for g in set {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        let vector = |tokens: &[String]| -> BTreeMap<Vec<String>, f64> {
            ngram_counts(tokens, n)
                .into_iter()
                .map(|(g, c)| {
                    let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
                    (g.to_vec(), c as f64 * (log_images - d.ln()))
                })
                .collect()
        };
        for (i, cand) in cands.iter().enumerate() {
            let vc = vector(cand);
            let nc = vc.values().map(|v| v * v).sum::<f64>().sqrt();
            let mut sum = 0.0;
            for r in &refs[i] {
                let vr = vector(r);
                let nr = vr.values().map(|v| v * v).sum::<f64>().sqrt();
                if nc > 0.0 && nr > 0.0 {
                    let dot: f64 = vc.iter().map(|(g, a)| a * vr.get(g).copied().unwrap_or(0.0)).sum();
                    sum += dot / (nc * nr);
                }
            }
            per_image[i] += sum / refs[i].len() as f64 / 4.0 * 10.0;
        }
    }
    let score = per_image.iter().sum::<f64>() / per_image.len() as f64;
    Ok(CiderReport {
        score,
        per_image,
        single_image,
    })
}
