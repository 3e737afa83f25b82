//! Pretraining losses and the rank-based adapter.

use std::path::Path;

use aesvl_autograd::{Graph, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::container::{self, Stored};
use crate::error::{CheckpointError, Error, Result};
use crate::tokenizer::PAD;

pub const DEFAULT_MARGIN: f64 = 0.1;
pub const MARGIN_GRID: [f64; 5] = [0.01, 0.05, 0.1, 0.15, 0.2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 2.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha + self.beta > 0.0) {
            return Err(Error::Config(format!(
                "loss weights need alpha, beta >= 0 with a positive sum, got {}:{}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// Symmetric InfoNCE over `[N, D]` unit rows `x`, `y`, with logits divided
/// by `tau = exp(log_tau)`. The two directions are each averaged over `N`
/// and then summed.
pub fn contrastive_loss<T: Real>(g: &mut Graph<T>, x: Var, y: Var, log_tau: Var) -> Result<Var> {
    let n = g.shape(x)[0];
    if g.shape(x) != g.shape(y) || g.shape(x).len() != 2 {
        return Err(aesvl_autograd::GraphError::ShapeMismatch {
            op: "contrastive_loss",
            shapes: vec![g.shape(x).to_vec(), g.shape(y).to_vec()],
        }
        .into());
    }
    let yt = g.transpose(y)?;
    let sim = g.matmul(x, yt)?;
    let neg = g.scale(log_tau, -T::one())?;
    let inv_tau = g.exp(neg)?;
    let logits = g.mul_scalar(sim, inv_tau)?;
    let diag: Vec<usize> = (0..n).collect();
    let all = vec![true; n];
    let i2t = g.cross_entropy(logits, &diag, &all)?;
    let lt = g.transpose(logits)?;
    let t2i = g.cross_entropy(lt, &diag, &all)?;
    let total = g.add(i2t, t2i)?;
    Ok(g.scale(total, T::one() / T::lit(n as f64))?)
}

/// [`contrastive_loss`] on plain tensors with an explicit temperature.
pub fn contrastive_loss_value(x: &Tensor<f64>, y: &Tensor<f64>, tau: f64) -> Result<f64> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::Invalid(format!("temperature must be positive, got {tau}")));
    }
    if x.rank() != 2 || x.rows() == 0 {
        return Err(Error::Invalid("contrastive loss needs a nonempty [N, D] batch".into()));
    }
    let mut g = Graph::new();
    let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
    let lt = g.constant(Tensor::scalar(tau.ln()));
    let l = contrastive_loss(&mut g, xv, yv, lt)?;
    Ok(g.value(l).item())
}

/// Summed negative log-likelihood of `targets` under `logits` (`[.., vocab]`
/// with one row per target). `<pad>` targets contribute nothing.
pub fn generative_loss<T: Real>(g: &mut Graph<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    let mask: Vec<bool> = targets.iter().map(|&t| t != PAD).collect();
    Ok(g.cross_entropy(logits, targets, &mask)?)
}

/// `alpha * l_con + beta * l_gen`; non-finite components are rejected.
pub fn pretraining_loss<T: Real>(g: &mut Graph<T>, l_con: Var, l_gen: Var, w: LossWeights) -> Result<Var> {
    w.validate()?;
    let (c, n) = (g.value(l_con).item(), g.value(l_gen).item());
    if !c.is_finite() || !n.is_finite() {
        return Err(Error::Invalid(format!(
            "non-finite loss component: contrastive {c}, generative {n}"
        )));
    }
    let a = g.scale(l_con, T::lit(w.alpha))?;
    let b = g.scale(l_gen, T::lit(w.beta))?;
    Ok(g.add(a, b)?)
}

/// Adapter parameters: the residual projection `H`, the frozen unit anchor
/// `w_p` and the ablation switches.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterState<T: Real> {
    pub h: Tensor<T>,
    pub anchor: Tensor<T>,
    pub margin: f64,
    pub use_residual: bool,
    pub use_text_anchor: bool,
    /// Trained in place of `anchor` when `use_text_anchor` is off.
    pub learnable_anchor: Option<Tensor<T>>,
}

pub const ADAPTER_H: &str = "adapter.H";
pub const ADAPTER_ANCHOR: &str = "adapter.anchor";
pub const ADAPTER_LEARNABLE: &str = "adapter.learnable_anchor";
const ADAPTER_META: &str = "adapter.meta";

impl<T: Real> AdapterState<T> {
    /// `H = 0` with the given unit anchor. Without the text anchor, the
    /// learnable anchor starts from the same vector.
    pub fn new(anchor: Tensor<T>, margin: f64, use_residual: bool, use_text_anchor: bool) -> Result<Self> {
        let d = anchor.numel();
        let norm = anchor
            .data()
            .iter()
            .map(|&v| v * v)
            .sum::<T>()
            .sqrt()
            .to_f64()
            .unwrap_or(0.0);
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::Invalid(format!("anchor must be unit norm, got {norm}")));
        }
        let anchor = anchor.reshape(&[d])?;
        Ok(Self {
            h: Tensor::zeros(&[d, d]),
            learnable_anchor: (!use_text_anchor).then(|| anchor.clone()),
            anchor,
            margin,
            use_residual,
            use_text_anchor,
        })
    }

    pub fn dim(&self) -> usize {
        self.anchor.numel()
    }

    /// Scores `v` (`[N, D]`, unnormalized) as plain numbers.
    pub fn scores(&self, v: &Tensor<T>) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let vars = AdapterVars::bind(&mut g, self, false);
        let vv = g.constant(v.clone());
        let s = vars.score(&mut g, vv)?;
        Ok(g.value(s)
            .data()
            .iter()
            .map(|x| x.to_f64().unwrap_or(f64::NAN))
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = Tensor::new(
            &[3],
            vec![
                self.margin,
                self.use_residual as u8 as f64,
                self.use_text_anchor as u8 as f64,
            ],
        )?;
        let mut entries = vec![
            (ADAPTER_H.to_string(), Stored::from_tensor(&self.h)),
            (ADAPTER_ANCHOR.to_string(), Stored::from_tensor(&self.anchor)),
            (ADAPTER_META.to_string(), Stored::from_tensor(&meta)),
        ];
        if let Some(a) = &self.learnable_anchor {
            entries.push((ADAPTER_LEARNABLE.to_string(), Stored::from_tensor(a)));
        }
        container::save(path, &entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let entries = container::load(path)?;
        let fail = |k| Error::checkpoint(path, k);
        fn find<U: Real>(entries: &container::Entries, name: &str) -> Result<Tensor<U>, CheckpointError> {
            let (_, s) = entries
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| CheckpointError::MissingTensor(name.into()))?;
            s.to_tensor(name)
        }
        for (n, _) in &entries {
            if ![ADAPTER_H, ADAPTER_ANCHOR, ADAPTER_META, ADAPTER_LEARNABLE].contains(&n.as_str()) {
                return Err(fail(CheckpointError::UnknownTensor(n.clone())));
            }
        }
        let h: Tensor<T> = find(&entries, ADAPTER_H).map_err(fail)?;
        let anchor: Tensor<T> = find(&entries, ADAPTER_ANCHOR).map_err(fail)?;
        let meta: Tensor<f64> = find(&entries, ADAPTER_META).map_err(fail)?;
        let d = anchor.numel();
        if h.shape() != [d, d] {
            return Err(fail(CheckpointError::ShapeMismatch {
                name: ADAPTER_H.into(),
                expected: vec![d, d],
                found: h.shape().to_vec(),
            }));
        }
        let m = meta.data();
        if m.len() != 3 {
            return Err(fail(CheckpointError::InvalidShape(ADAPTER_META.into())));
        }
        let use_text_anchor = m[2] != 0.0;
        let learnable_anchor = if use_text_anchor {
            None
        } else {
            Some(find(&entries, ADAPTER_LEARNABLE).map_err(fail)?)
        };
        Ok(Self {
            h,
            anchor,
            margin: m[0],
            use_residual: m[1] != 0.0,
            use_text_anchor,
            learnable_anchor,
        })
    }
}

/// Adapter tensors registered in a graph.
pub struct AdapterVars {
    pub h: Var,
    pub anchor: Var,
    pub learnable_anchor: Option<Var>,
    pub use_residual: bool,
    pub margin: f64,
}

impl AdapterVars {
    /// `H` (and the learnable anchor, if any) become trainable leaves when
    /// `trainable`; the text anchor is always a constant.
    pub fn bind<T: Real>(g: &mut Graph<T>, s: &AdapterState<T>, trainable: bool) -> Self {
        Self {
            h: g.leaf(s.h.clone(), trainable),
            anchor: g.constant(s.anchor.clone()),
            learnable_anchor: s.learnable_anchor.as_ref().map(|a| g.leaf(a.clone(), trainable)),
            use_residual: s.use_residual,
            margin: s.margin,
        }
    }

    pub fn score<T: Real>(&self, g: &mut Graph<T>, v: Var) -> Result<Var> {
        let vt = adapt_embedding(g, v, self.h, self.use_residual)?;
        adapter_score(
            g,
            vt,
            self.learnable_anchor.unwrap_or(self.anchor),
            self.learnable_anchor.is_some(),
        )
    }

    pub fn loss<T: Real>(&self, g: &mut Graph<T>, v: Var, labels: &[f64]) -> Result<Var> {
        let s = self.score(g, v)?;
        rank_loss(g, s, labels, self.margin)
    }
}

/// `normalize(v H + v)`, or `normalize(v H)` without the residual; `v` is `[N, D]`.
pub fn adapt_embedding<T: Real>(g: &mut Graph<T>, v: Var, h: Var, use_residual: bool) -> Result<Var> {
    let vh = g.matmul(v, h)?;
    let pre = if use_residual { g.add(vh, v)? } else { vh };
    Ok(g.l2_normalize(pre)?)
}

/// Cosine scores `[N, 1]` of unit rows `vt` against `anchor` (`[D]`). A
/// learnable anchor is normalized first.
pub fn adapter_score<T: Real>(g: &mut Graph<T>, vt: Var, anchor: Var, normalize_anchor: bool) -> Result<Var> {
    let d = g.value(anchor).numel();
    let a = if normalize_anchor {
        let row = g.reshape(anchor, &[1, d])?;
        let row = g.l2_normalize(row)?;
        g.reshape(row, &[d, 1])?
    } else {
        g.reshape(anchor, &[d, 1])?
    };
    Ok(g.matmul(vt, a)?)
}

/// Ordered pairs `(i, j)` with `labels[i] > labels[j]`.
pub fn rank_pairs(labels: &[f64]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..labels.len() {
        for j in 0..labels.len() {
            if labels[i] > labels[j] {
                out.push((i, j));
            }
        }
    }
    out
}

/// Mean hinge `max(0, m - s_i + s_j)` over strictly ordered label pairs.
/// `scores` is `[N, 1]` (or `[N]`).
pub fn rank_loss<T: Real>(g: &mut Graph<T>, scores: Var, labels: &[f64], margin: f64) -> Result<Var> {
    let n = g.value(scores).numel();
    if labels.len() != n {
        return Err(Error::Invalid(format!("{} labels for {n} scores", labels.len())));
    }
    if n < 2 {
        return Err(Error::Invalid("rank loss needs at least two images".into()));
    }
    let pairs = rank_pairs(labels);
    if pairs.is_empty() {
        return Err(Error::AllTied);
    }
    let mut a = Tensor::<T>::zeros(&[pairs.len(), n]);
    for (p, &(i, j)) in pairs.iter().enumerate() {
        a.data_mut()[p * n + i] = T::one();
        a.data_mut()[p * n + j] = -T::one();
    }
    let a = g.constant(a);
    let s = g.reshape(scores, &[n, 1])?;
    let diff = g.matmul(a, s)?;
    let neg = g.scale(diff, -T::one())?;
    let slack = g.add_scalar(neg, T::lit(margin))?;
    let hinge = g.relu(slack)?;
    Ok(g.mean(hinge)?)
}
