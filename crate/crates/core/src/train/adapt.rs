use std::collections::BTreeMap;

use aesvl_autograd::{Graph, Real, Tensor};

use super::optim::{linear_decay, AdamW};
use super::runlog::{LogEntry, RunLog};
use crate::config::AdaptConfig;
use crate::data::{make_batches, AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::metrics::srcc;
use crate::model::{image_embeddings, text_embeddings, ModelConfig, ParamStore};
use crate::objectives::{rank_pairs, AdapterState, AdapterVars, ADAPTER_H, ADAPTER_LEARNABLE};
use crate::prompts::ANCHOR_PROMPT;
use crate::tokenizer::{Mode, Vocabulary};

const EMBED_CHUNK: usize = 64;

/// Frozen image features of a dataset: unit contrastive embeddings `x` and
/// the unnormalized pooler outputs `v`, both `[N, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenFeatures<T: Real> {
    pub x: Tensor<T>,
    pub v: Tensor<T>,
}

fn stack_rows<T: Real>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    let d = parts[0].cols();
    let data: Vec<T> = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Ok(Tensor::new(&[data.len() / d, d], data)?)
}

/// Center-crop features of every record, computed in fixed-size chunks.
pub fn embed_dataset<T: Real>(
    model: &ModelConfig,
    params: &ParamStore<T>,
    ds: &Dataset,
    aug: &AugmentConfig,
) -> Result<FrozenFeatures<T>> {
    if ds.is_empty() {
        return Err(Error::Invalid("no images to embed".into()));
    }
    let idx: Vec<usize> = (0..ds.len()).collect();
    let (mut xs, mut vs) = (Vec::new(), Vec::new());
    for chunk in idx.chunks(EMBED_CHUNK) {
        let images = ds.eval_images::<T>(chunk, aug)?;
        let (x, v) = image_embeddings(model, params, &images)?;
        xs.push(x);
        vs.push(v);
    }
    Ok(FrozenFeatures {
        x: stack_rows(&xs)?,
        v: stack_rows(&vs)?,
    })
}

/// Unit text embedding `[D]` of the anchor prompt.
pub fn anchor_embedding<T: Real>(model: &ModelConfig, params: &ParamStore<T>, vocab: &Vocabulary) -> Result<Tensor<T>> {
    let seq = vocab.encode(ANCHOR_PROMPT, Mode::Contrastive, model.max_text_length);
    let y = text_embeddings(model, params, &[seq])?;
    Ok(y.reshape(&[model.dim])?)
}

fn select<T: Real>(v: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    let d = v.cols();
    let data = idx.iter().flat_map(|&i| v.row(i).iter().copied()).collect();
    Ok(Tensor::new(&[idx.len(), d], data)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptReport {
    pub tunable: usize,
    pub total: usize,
    pub fraction: f64,
    /// Updates skipped because their batch had no strictly ordered pair.
    pub skipped_batches: usize,
    pub final_train_srcc: f64,
}

/// Trains the adapter on cached features `v` (`[N, D]`) against `mos`. Only
/// `H` (and the learnable anchor in that variant) change; `backbone_params`
/// is the frozen model's size for the tunable fraction.
pub fn adapter_finetune<T: Real>(
    cfg: &AdaptConfig,
    seed: u64,
    state: &mut AdapterState<T>,
    v: &Tensor<T>,
    mos: &[f64],
    backbone_params: usize,
    log: &mut RunLog,
) -> Result<AdaptReport> {
    let n = v.rows();
    if n != mos.len() {
        return Err(Error::Invalid(format!("{n} embeddings but {} labels", mos.len())));
    }
    if rank_pairs(mos).is_empty() {
        return Err(Error::AllTied);
    }
    let batch_size = cfg.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(batch_size);
    let mut opt = AdamW::<T>::default();
    let mut skipped = 0;
    let mut plan: Option<(u64, Vec<Vec<usize>>)> = None;
    for s in 0..cfg.steps {
        let epoch = (s / steps_per_epoch) as u64;
        if plan.as_ref().is_none_or(|(e, _)| *e != epoch) {
            plan = Some((epoch, make_batches(n, batch_size, seed, epoch)));
        }
        let idx = &plan.as_ref().expect("plan set above").1[s % steps_per_epoch];
        let labels: Vec<f64> = idx.iter().map(|&i| mos[i]).collect();
        if idx.len() < 2 || rank_pairs(&labels).is_empty() {
            skipped += 1;
            continue;
        }
        let lr = linear_decay(cfg.learning_rate, s, cfg.steps);
        let mut g = Graph::new();
        let vars = AdapterVars::bind(&mut g, state, true);
        let vb = g.constant(select(v, idx)?);
        let loss = vars.loss(&mut g, vb, &labels)?;
        let lv = g.value(loss).item().to_f64().unwrap_or(f64::NAN);
        if !lv.is_finite() {
            return Err(Error::NonFinite {
                step: s + 1,
                components: format!("rank={lv}"),
            });
        }
        g.backward(loss)?;
        let gh = g.grad(vars.h).expect("H is trainable");
        let ga = vars.learnable_anchor.map(|a| g.grad(a).expect("anchor is trainable"));
        opt.begin();
        opt.update(ADAPTER_H, &mut state.h, &gh, lr, cfg.weight_decay);
        if let (Some(a), Some(ga)) = (state.learnable_anchor.as_mut(), ga) {
            opt.update(ADAPTER_LEARNABLE, a, &ga, lr, 0.0);
        }
        log.push(LogEntry::Step {
            step: s + 1,
            loss: lv,
            components: BTreeMap::from([("rank".to_string(), lv)]),
            tau: None,
            lr,
        })?;
        if cfg.eval_every > 0 && (s + 1) % cfg.eval_every == 0 {
            let r = srcc(&state.scores(v)?, mos)?;
            log.push(LogEntry::Eval {
                step: s + 1,
                metrics: BTreeMap::from([("train_srcc".to_string(), r)]),
            })?;
        }
    }
    if skipped == cfg.steps {
        return Err(Error::AllTied);
    }
    let tunable = state.h.numel() + state.learnable_anchor.as_ref().map_or(0, Tensor::numel);
    let total = backbone_params + tunable;
    Ok(AdaptReport {
        tunable,
        total,
        fraction: tunable as f64 / total as f64,
        skipped_batches: skipped,
        final_train_srcc: srcc(&state.scores(v)?, mos)?,
    })
}

/// Held-out SRCC per margin, each run from the same zero-initialized adapter.
#[allow(clippy::too_many_arguments)]
pub fn margin_sweep<T: Real>(
    cfg: &AdaptConfig,
    seed: u64,
    anchor: &Tensor<T>,
    train: (&Tensor<T>, &[f64]),
    test: (&Tensor<T>, &[f64]),
    margins: &[f64],
    backbone_params: usize,
) -> Result<Vec<(f64, f64)>> {
    margins
        .iter()
        .map(|&m| {
            let mut state = AdapterState::new(anchor.clone(), m, cfg.residual, cfg.text_anchor)?;
            let c = AdaptConfig {
                margin: m,
                ..cfg.clone()
            };
            adapter_finetune(
                &c,
                seed,
                &mut state,
                train.0,
                train.1,
                backbone_params,
                &mut RunLog::new(),
            )?;
            Ok((m, srcc(&state.scores(test.0)?, test.1)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn features(n: usize, d: usize, seed: u64) -> (Tensor<f64>, Vec<f64>) {
        use rand::Rng;
        let mut rng = crate::data::derive_rng(seed, &[]);
        let v = Tensor::from_fn(&[n, d], |_| rng.random_range(-1.0..1.0));
        // label driven by the first coordinate
        let mos = (0..n).map(|i| 5.0 + 4.0 * v.row(i)[0]).collect();
        (v, mos)
    }

    fn anchor(d: usize) -> Tensor<f64> {
        let mut a = vec![0.0; d];
        a[1] = 1.0;
        Tensor::new(&[d], a).unwrap()
    }

    #[test]
    fn learns_a_linear_quality_direction() {
        let (v, mos) = features(128, 6, 1);
        let cfg = AdaptConfig {
            steps: 300,
            batch_size: 32,
            ..AdaptConfig::default()
        };
        let mut st = AdapterState::new(anchor(6), 0.1, true, true).unwrap();
        let before = srcc(&st.scores(&v).unwrap(), &mos).unwrap();
        let mut log = RunLog::new();
        let rep = adapter_finetune(&cfg, 3, &mut st, &v, &mos, 1000, &mut log).unwrap();
        assert!(before.abs() < 0.3, "{before}");
        assert!(rep.final_train_srcc > 0.9, "{}", rep.final_train_srcc);
        assert_eq!(rep.tunable, 36);
        assert_eq!(rep.total, 1036);
        assert_eq!(log.losses().len(), 300);
    }

    #[test]
    fn all_tied_labels_abort() {
        let (v, _) = features(10, 4, 2);
        let mut st = AdapterState::new(anchor(4), 0.1, true, true).unwrap();
        let cfg = AdaptConfig::default();
        let err = adapter_finetune(&cfg, 0, &mut st, &v, &[3.0; 10], 0, &mut RunLog::new()).unwrap_err();
        assert!(matches!(err, Error::AllTied));
    }

    #[test]
    fn learnable_anchor_variant_moves_anchor_only_in_that_variant() {
        let (v, mos) = features(64, 4, 5);
        let cfg = AdaptConfig {
            steps: 20,
            text_anchor: false,
            ..AdaptConfig::default()
        };
        let mut st = AdapterState::new(anchor(4), 0.1, true, false).unwrap();
        let a0 = st.anchor.clone();
        let l0 = st.learnable_anchor.clone().unwrap();
        adapter_finetune(&cfg, 0, &mut st, &v, &mos, 0, &mut RunLog::new()).unwrap();
        assert!(st.anchor.bit_eq(&a0));
        assert!(!st.learnable_anchor.unwrap().bit_eq(&l0));
    }
}
