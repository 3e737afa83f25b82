//! Brute-force metric definitions, written without reference to the library
//! implementations.

use aesvl::tokenizer::words;

fn toks(s: &str) -> Vec<String> {
    words(s).collect()
}

/// 1-based rank with ties averaged, by counting.
pub fn rank(x: &[f64], i: usize) -> f64 {
    let below = x.iter().filter(|&&v| v < x[i]).count() as f64;
    let equal = x.iter().filter(|&&v| v == x[i]).count() as f64;
    below + (equal + 1.0) / 2.0
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx: f64 = x.iter().sum::<f64>() / n;
    let my: f64 = y.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..x.len() {
        num += (x[i] - mx) * (y[i] - my);
        vx += (x[i] - mx).powi(2);
        vy += (y[i] - my).powi(2);
    }
    num / (vx.sqrt() * vy.sqrt())
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let rx: Vec<f64> = (0..x.len()).map(|i| rank(x, i)).collect();
    let ry: Vec<f64> = (0..y.len()).map(|i| rank(y, i)).collect();
    pearson(&rx, &ry)
}

/// Mean of precision@rank over positives; ties ranked by input order.
pub fn average_precision(scores: &[f64], pos: &[bool]) -> f64 {
    let n = scores.len();
    let position = |i: usize| {
        (0..n)
            .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
            .count()
            + 1
    };
    let mut total = 0.0;
    let mut count = 0;
    for i in (0..n).filter(|&i| pos[i]) {
        let k = position(i);
        let hits = (0..n).filter(|&j| pos[j] && position(j) <= k).count();
        total += hits as f64 / k as f64;
        count += 1;
    }
    total / count as f64
}

fn grams(t: &[String], n: usize) -> Vec<Vec<String>> {
    if t.len() < n {
        return Vec::new();
    }
    (0..=t.len() - n).map(|i| t[i..i + n].to_vec()).collect()
}

fn count(list: &[Vec<String>], g: &[String]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

pub fn bleu(cand: &str, refs: &[String], n: usize) -> f64 {
    let c = toks(cand);
    if c.is_empty() {
        return 0.0;
    }
    let r: Vec<Vec<String>> = refs.iter().map(|s| toks(s)).collect();
    let mut logp = 0.0;
    for k in 1..=n {
        let cg = grams(&c, k);
        if cg.is_empty() {
            return 0.0;
        }
        let rg: Vec<Vec<Vec<String>>> = r.iter().map(|t| grams(t, k)).collect();
        let mut distinct: Vec<Vec<String>> = Vec::new();
        for g in &cg {
            if !distinct.contains(g) {
                distinct.push(g.clone());
            }
        }
        let mut clipped = 0;
        for g in &distinct {
            let best = rg.iter().map(|x| count(x, g)).max().unwrap_or(0);
            clipped += count(&cg, g).min(best);
        }
        if clipped == 0 {
            return 0.0;
        }
        logp += (clipped as f64 / cg.len() as f64).ln();
    }
    let mut best_len = r[0].len();
    for t in &r {
        let (d, bd) = (t.len().abs_diff(c.len()), best_len.abs_diff(c.len()));
        if d < bd || (d == bd && t.len() < best_len) {
            best_len = t.len();
        }
    }
    let bp = if c.len() > best_len {
        1.0
    } else {
        (1.0 - best_len as f64 / c.len() as f64).exp()
    };
    bp * (logp / n as f64).exp()
}

fn lcs(a: &[String], b: &[String], memo: &mut Vec<Vec<Option<usize>>>, i: usize, j: usize) -> usize {
    if i == a.len() || j == b.len() {
        return 0;
    }
    if let Some(v) = memo[i][j] {
        return v;
    }
    let v = if a[i] == b[j] {
        1 + lcs(a, b, memo, i + 1, j + 1)
    } else {
        lcs(a, b, memo, i + 1, j).max(lcs(a, b, memo, i, j + 1))
    };
    memo[i][j] = Some(v);
    v
}

pub fn rouge_l(cand: &str, refs: &[String]) -> f64 {
    let c = toks(cand);
    let mut best = 0.0f64;
    for r in refs {
        let r = toks(r);
        if c.is_empty() || r.is_empty() {
            continue;
        }
        let mut memo = vec![vec![None; r.len()]; c.len()];
        let l = lcs(&c, &r, &mut memo, 0, 0) as f64;
        if l == 0.0 {
            continue;
        }
        let p = l / c.len() as f64;
        let q = l / r.len() as f64;
        best = best.max(2.0 * p * q / (p + q));
    }
    best
}

/// Corpus CIDEr: tf-idf n-gram vectors (idf from reference document
/// frequency, floored at one), cosine per reference, mean over references
/// and over n = 1..4, times 10, averaged over images.
pub fn cider(items: &[(String, Vec<String>)]) -> f64 {
    let n_img = items.len() as f64;
    let mut total = 0.0;
    for (i, (cand, refs)) in items.iter().enumerate() {
        let mut score = 0.0;
        for n in 1..=4 {
            let df = |g: &[String]| -> f64 {
                let d = items
                    .iter()
                    .filter(|(_, rs)| rs.iter().any(|r| count(&grams(&toks(r), n), g) > 0))
                    .count();
                d.max(1) as f64
            };
            let vec_of = |s: &str| -> Vec<(Vec<String>, f64)> {
                let gs = grams(&toks(s), n);
                let mut out: Vec<(Vec<String>, f64)> = Vec::new();
                for g in &gs {
                    if !out.iter().any(|(x, _)| x == g) {
                        out.push((g.clone(), count(&gs, g) as f64 * (n_img / df(g)).ln()));
                    }
                }
                out
            };
            let norm = |v: &[(Vec<String>, f64)]| v.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
            let vc = vec_of(cand);
            let mut s = 0.0;
            for r in refs {
                let vr = vec_of(r);
                let (a, b) = (norm(&vc), norm(&vr));
                if a == 0.0 || b == 0.0 {
                    continue;
                }
                let dot: f64 = vc
                    .iter()
                    .map(|(g, w)| w * vr.iter().find(|(h, _)| h == g).map_or(0.0, |(_, x)| *x))
                    .sum();
                s += dot / (a * b);
            }
            score += s / refs.len() as f64;
        }
        total += score / 4.0 * 10.0;
        let _ = i;
    }
    total / n_img
}

const WORDS: [&str; 6] = ["the", "cat", "sat", "on", "mat", "dog"];

/// Random sentence of `lo..=hi` words from a six-word vocabulary.
pub fn sentence(r: &mut rand_chacha::ChaCha8Rng, lo: usize, hi: usize) -> String {
    use rand::Rng;
    let n = r.random_range(lo..=hi);
    (0..n)
        .map(|_| WORDS[r.random_range(0..WORDS.len())])
        .collect::<Vec<_>>()
        .join(" ")
}
