use std::collections::BTreeMap;
use std::path::Path;

use aesvl_autograd::{Graph, GraphError, Real, Tensor, Var};

use super::optim::{clip_global_norm, linear_decay, AdamW};
use super::runlog::{LogEntry, RunLog};
use crate::config::Config;
use crate::container;
use crate::data::{
    collate, make_batches, AugmentConfig, Batch, CollateOptions, CommentSampling, Dataset, ManifestRecord,
};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Net, ParamStore, LOG_TAU};
use crate::objectives::{contrastive_loss, generative_loss, pretraining_loss, LossWeights};
use crate::prompts::PromptBank;
use crate::tokenizer::{build_vocab, Vocabulary};

pub const TAU_MIN: f64 = 1e-3;
pub const TAU_MAX: f64 = 10.0;
const EVAL_BATCH: usize = 32;

/// Vocabulary over every comment plus every prompt of the bank, capped at
/// `max_size` entries.
pub fn corpus_vocab(records: &[ManifestRecord], bank: &PromptBank, max_size: usize) -> Result<Vocabulary> {
    let mut corpus: Vec<&str> = records
        .iter()
        .flat_map(|r| r.comments.iter().map(String::as_str))
        .collect();
    corpus.extend(bank.texts());
    build_vocab(&corpus, max_size)
}

/// Parameters, optimizer moments and the number of completed updates.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainState<T: Real> {
    pub params: ParamStore<T>,
    pub optim: AdamW<T>,
}

impl<T: Real> PretrainState<T> {
    pub fn fresh(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            params: ParamStore::init(cfg, seed)?,
            optim: AdamW::default(),
        })
    }

    pub fn step(&self) -> usize {
        self.optim.t as usize
    }

    /// Model tensors plus `optim/*` entries, so a run can resume.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = self.params.to_entries();
        entries.extend(self.optim.to_entries());
        container::save(path, &entries)
    }

    /// Loads a checkpoint; one without optimizer entries starts with fresh
    /// moments at step 0.
    pub fn load(cfg: &ModelConfig, path: &Path) -> Result<Self> {
        let entries = container::load(path)?;
        let fail = |k| Error::checkpoint(path, k);
        let params = ParamStore::from_entries(cfg, &entries).map_err(fail)?;
        let optim = AdamW::from_entries(&entries).map_err(fail)?.unwrap_or_default();
        Ok(Self { params, optim })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub contrastive: f64,
    pub generative: f64,
    pub tau: f64,
    pub grad_norm: f64,
}

fn value<T: Real>(g: &Graph<T>, v: Var) -> f64 {
    g.value(v).item().to_f64().unwrap_or(f64::NAN)
}

/// Contrastive loss and per-sequence generative loss of one batch.
fn batch_losses<T: Real>(g: &mut Graph<T>, net: &Net, batch: &Batch<T>) -> Result<(Var, Var)> {
    let v = net.encode_image(g, &batch.images)?;
    let con = net.image_embedding(g, v)?;
    let x = g.l2_normalize(con)?;
    let w = net.encode_text_unimodal(g, &batch.contrastive)?;
    let t = net.text_embedding(g, w, &batch.contrastive)?;
    let y = g.l2_normalize(t)?;
    let l_con = contrastive_loss(g, x, y, net.p.get(LOG_TAU))?;
    let pooled = net.attentional_pool(g, v, "gen")?;
    let logits = net.decode_multimodal(g, &batch.gen_inputs, pooled)?;
    let v_flat = g.shape(logits).to_vec();
    let logits = g.reshape(logits, &[v_flat[0] * v_flat[1], v_flat[2]])?;
    let summed = generative_loss(g, logits, &batch.gen_targets)?;
    let n = batch.contrastive.batch as f64;
    let l_gen = g.scale(summed, T::lit(1.0 / n))?;
    Ok((l_con, l_gen))
}

/// Loss components on a batch without updating anything.
pub fn evaluate_batch<T: Real>(
    model: &ModelConfig,
    params: &ParamStore<T>,
    batch: &Batch<T>,
    w: LossWeights,
) -> Result<StepReport> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let net = Net::new(model, &bound);
    let (l_con, l_gen) = batch_losses(&mut g, &net, batch)?;
    let (c, n) = (value(&g, l_con), value(&g, l_gen));
    Ok(StepReport {
        loss: w.alpha * c + w.beta * n,
        contrastive: c,
        generative: n,
        tau: params.tau(),
        grad_norm: 0.0,
    })
}

/// One optimizer update on `batch` at learning rate `lr`. The update counter
/// in `state.optim` advances by one.
pub fn pretrain_step<T: Real>(
    cfg: &Config,
    state: &mut PretrainState<T>,
    batch: &Batch<T>,
    lr: f64,
) -> Result<StepReport> {
    let p = &cfg.pretrain;
    let mut g = Graph::new();
    let bound = state.params.bind(&mut g, true);
    let net = Net::new(&cfg.model, &bound);
    let (l_con, l_gen) = match batch_losses(&mut g, &net, batch) {
        Err(Error::Graph(GraphError::Degenerate { op, norm, .. })) if !norm.is_finite() => {
            return Err(Error::NonFinite {
                step: state.step() + 1,
                components: format!("{op} norm={norm}"),
            })
        }
        r => r?,
    };
    let (c, n) = (value(&g, l_con), value(&g, l_gen));
    if !c.is_finite() || !n.is_finite() {
        return Err(Error::NonFinite {
            step: state.step() + 1,
            components: format!("contrastive={c} generative={n}"),
        });
    }
    let loss = pretraining_loss(&mut g, l_con, l_gen, p.weights())?;
    let total = value(&g, loss);
    g.backward(loss)?;

    let names: Vec<(String, Var)> = bound.iter().map(|(n, v)| (n.clone(), *v)).collect();
    let mut grads: Vec<Tensor<T>> = names
        .iter()
        .map(|(name, v)| {
            g.grad(*v)
                .unwrap_or_else(|| Tensor::zeros(state.params.get(name).expect("bound from store").shape()))
        })
        .collect();
    drop(g);
    let grad_norm = clip_global_norm(&mut grads, p.grad_clip);
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite {
            step: state.step() + 1,
            components: format!("contrastive={c} generative={n} grad_norm={grad_norm}"),
        });
    }
    state.optim.begin();
    for ((name, _), grad) in names.iter().zip(&grads) {
        let t = state.params.get_mut(name).expect("bound from store");
        // biases, norms and the temperature are not decayed
        let wd = if t.rank() >= 2 { p.weight_decay } else { 0.0 };
        state.optim.update(name, t, grad, lr, wd);
    }
    let lt = state.params.get_mut(LOG_TAU).expect("temperature parameter");
    let (lo, hi) = (T::lit(TAU_MIN.ln()), T::lit(TAU_MAX.ln()));
    lt.data_mut().iter_mut().for_each(|v| *v = v.max(lo).min(hi));
    Ok(StepReport {
        loss: total,
        contrastive: c,
        generative: n,
        tau: state.params.tau(),
        grad_norm,
    })
}

/// Everything a pretraining run reads besides its state.
pub struct PretrainData<'a> {
    pub ds: &'a Dataset,
    pub vocab: &'a Vocabulary,
    /// Records for the periodic held-out loss; training records otherwise.
    pub eval: Option<&'a Dataset>,
}

/// Runs updates `state.step() .. stop_at` (at most `cfg.pretrain.steps`).
/// Batch `s` is batch `s % steps_per_epoch` of epoch `s / steps_per_epoch`,
/// so a resumed run sees exactly the batches an uninterrupted one would.
/// `checkpoint` receives periodic and final saves.
pub fn pretrain<T: Real>(
    cfg: &Config,
    data: &PretrainData,
    state: &mut PretrainState<T>,
    stop_at: usize,
    log: &mut RunLog,
    checkpoint: Option<&Path>,
) -> Result<()> {
    let p = &cfg.pretrain;
    let ds = data.ds;
    if ds.is_empty() {
        return Err(Error::Invalid("pretraining needs at least one record".into()));
    }
    if let Some(r) = ds.records.iter().find(|r| r.comments.is_empty()) {
        return Err(Error::Record {
            id: r.id.clone(),
            msg: "no comments; pretraining needs at least one".into(),
        });
    }
    let opts = CollateOptions {
        vocab: data.vocab,
        max_text_length: cfg.model.max_text_length,
        augment: &cfg.augment,
        sampling: p.comment_sampling,
        seed: cfg.seed,
    };
    let eval_aug = AugmentConfig {
        enabled: false,
        ..cfg.augment
    };
    let eval_opts = CollateOptions {
        augment: &eval_aug,
        sampling: CommentSampling::Fixed,
        ..opts
    };
    let eval_ds = data.eval.unwrap_or(ds);
    let eval_idx: Vec<usize> = (0..eval_ds.len().min(EVAL_BATCH)).collect();

    let steps_per_epoch = ds.len().div_ceil(p.batch_size);
    let end = stop_at.min(p.steps);
    let mut plan: Option<(u64, Vec<Vec<usize>>)> = None;
    while state.step() < end {
        let s = state.step();
        let epoch = (s / steps_per_epoch) as u64;
        let bi = s % steps_per_epoch;
        if plan.as_ref().is_none_or(|(e, _)| *e != epoch) {
            plan = Some((epoch, make_batches(ds.len(), p.batch_size, cfg.seed, epoch)));
        }
        let idx = &plan.as_ref().expect("plan set above").1[bi];
        let batch = collate::<T>(ds, idx, epoch, bi as u64, &opts)?;
        let lr = linear_decay(p.learning_rate, s, p.steps);
        let r = pretrain_step(cfg, state, &batch, lr)?;
        let done = state.step();
        log.push(LogEntry::Step {
            step: done,
            loss: r.loss,
            components: BTreeMap::from([
                ("contrastive".to_string(), r.contrastive),
                ("generative".to_string(), r.generative),
                ("grad_norm".to_string(), r.grad_norm),
            ]),
            tau: Some(r.tau),
            lr,
        })?;
        if p.eval_every > 0 && done.is_multiple_of(p.eval_every) {
            let b = collate::<T>(eval_ds, &eval_idx, 0, 0, &eval_opts)?;
            let e = evaluate_batch(&cfg.model, &state.params, &b, p.weights())?;
            log.push(LogEntry::Eval {
                step: done,
                metrics: BTreeMap::from([
                    ("loss".to_string(), e.loss),
                    ("contrastive".to_string(), e.contrastive),
                    ("generative".to_string(), e.generative),
                ]),
            })?;
        }
        if let Some(path) = checkpoint {
            if p.checkpoint_every > 0 && done.is_multiple_of(p.checkpoint_every) && done < end {
                state.save(path)?;
            }
        }
        if done.is_multiple_of(50) {
            log::info!(
                "step {done}/{}: loss {:.4} (con {:.4}, gen {:.4}) tau {:.4}",
                p.steps,
                r.loss,
                r.contrastive,
                r.generative,
                r.tau
            );
        }
    }
    if let Some(path) = checkpoint {
        state.save(path)?;
    }
    Ok(())
}
