use std::collections::BTreeMap;
use std::path::Path;

use aesvl_autograd::{Graph, Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::container::{self, Entries, Stored};
use crate::error::{CheckpointError, Error, Result};

pub const INIT_STD: f64 = 0.02;
pub const INIT_TAU: f64 = 0.07;
pub const LOG_TAU: &str = "log_tau";
/// Prefix reserved for optimizer state inside checkpoints.
pub const OPTIM_PREFIX: &str = "optim/";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Normal,
    Zeros,
    Ones,
    LogTau,
}

fn push_ln(out: &mut Vec<(String, Vec<usize>, Init)>, p: &str, d: usize) {
    out.push((format!("{p}.gamma"), vec![d], Init::Ones));
    out.push((format!("{p}.beta"), vec![d], Init::Zeros));
}

fn push_linear(out: &mut Vec<(String, Vec<usize>, Init)>, p: &str, i: usize, o: usize) {
    out.push((format!("{p}.weight"), vec![i, o], Init::Normal));
    out.push((format!("{p}.bias"), vec![o], Init::Zeros));
}

fn push_attn(out: &mut Vec<(String, Vec<usize>, Init)>, p: &str, d: usize) {
    for proj in ["q", "k", "v", "o"] {
        push_linear(out, &format!("{p}.{proj}"), d, d);
    }
}

fn push_mlp(out: &mut Vec<(String, Vec<usize>, Init)>, p: &str, d: usize, m: usize) {
    push_linear(out, &format!("{p}.fc1"), d, m);
    push_linear(out, &format!("{p}.fc2"), m, d);
}

fn push_block(out: &mut Vec<(String, Vec<usize>, Init)>, p: &str, d: usize, m: usize) {
    push_ln(out, &format!("{p}.ln1"), d);
    push_attn(out, &format!("{p}.attn"), d);
    push_ln(out, &format!("{p}.ln2"), d);
    push_mlp(out, &format!("{p}.mlp"), d, m);
}

/// Every model tensor with its shape and initializer, in a fixed order.
pub fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, m) = (cfg.dim, cfg.mlp_dim);
    let mut out = Vec::new();
    push_linear(&mut out, "image.patch", cfg.patch_dim(), d);
    out.push(("image.pos".into(), vec![cfg.num_patches(), d], Init::Normal));
    for i in 0..cfg.encoder_layers {
        push_block(&mut out, &format!("image.layer{i}"), d, m);
    }
    push_ln(&mut out, "image.ln_final", d);

    out.push(("pool.con.query".into(), vec![1, d], Init::Normal));
    push_attn(&mut out, "pool.con.attn", d);
    out.push((
        "pool.gen.query".into(),
        vec![cfg.generative_pool_queries, d],
        Init::Normal,
    ));
    push_attn(&mut out, "pool.gen.attn", d);

    out.push(("text.token_emb".into(), vec![cfg.vocab_size, d], Init::Normal));
    out.push(("text.pos".into(), vec![cfg.max_text_length, d], Init::Normal));
    for i in 0..cfg.unimodal_layers {
        push_block(&mut out, &format!("text.uni{i}"), d, m);
    }
    push_ln(&mut out, "text.cls_ln", d);
    push_linear(&mut out, "text.proj", d, d);
    for i in 0..cfg.multimodal_layers {
        let p = format!("text.multi{i}");
        push_ln(&mut out, &format!("{p}.ln1"), d);
        push_attn(&mut out, &format!("{p}.self_attn"), d);
        push_ln(&mut out, &format!("{p}.ln2"), d);
        push_attn(&mut out, &format!("{p}.cross_attn"), d);
        push_ln(&mut out, &format!("{p}.ln3"), d);
        push_mlp(&mut out, &format!("{p}.mlp"), d, m);
    }
    push_ln(&mut out, "text.ln_final", d);
    push_linear(&mut out, "text.head", d, cfg.vocab_size);
    out.push((LOG_TAU.into(), vec![1], Init::LogTau));
    out
}

/// Normal(0, std) truncated to two standard deviations by resampling.
pub fn truncated_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let n = Normal::new(0.0, std).expect("positive std");
    loop {
        let x: f64 = n.sample(rng);
        if x.abs() <= 2.0 * std {
            return x;
        }
    }
}

/// Named model tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Real> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape, init) in layout(cfg) {
            let t = match init {
                Init::Normal => Tensor::from_fn(&shape, |_| T::lit(truncated_normal(&mut rng, INIT_STD))),
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::full(&shape, T::one()),
                Init::LogTau => Tensor::scalar(T::lit(INIT_TAU.ln())),
            };
            tensors.insert(name, t);
        }
        Ok(Self { tensors })
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor<T>>) -> Self {
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_params(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn tau(&self) -> f64 {
        self.tensors[LOG_TAU].item().to_f64().unwrap_or(f64::NAN).exp()
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((a, x), (b, y))| a == b && x.bit_eq(y))
    }

    /// Registers every tensor as a graph leaf.
    pub fn bind(&self, g: &mut Graph<T>, requires_grad: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(n, t)| (n.clone(), g.leaf(t.clone(), requires_grad)))
            .collect();
        Bound { vars }
    }

    pub fn to_entries(&self) -> Entries {
        self.tensors
            .iter()
            .map(|(n, t)| (n.clone(), Stored::from_tensor(t)))
            .collect()
    }

    /// Collects the model tensors of `cfg` from `entries`, checking names and
    /// shapes. Entries under [`OPTIM_PREFIX`] are ignored.
    pub fn from_entries(cfg: &ModelConfig, entries: &Entries) -> Result<Self, CheckpointError> {
        let expected = layout(cfg);
        let mut tensors = BTreeMap::new();
        for (name, stored) in entries {
            if name.starts_with(OPTIM_PREFIX) {
                continue;
            }
            let (_, shape, _) = expected
                .iter()
                .find(|(n, _, _)| n == name)
                .ok_or_else(|| CheckpointError::UnknownTensor(name.clone()))?;
            if stored.shape != *shape {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: stored.shape.clone(),
                });
            }
            tensors.insert(name.clone(), stored.to_tensor(name)?);
        }
        if let Some((missing, _, _)) = expected.iter().find(|(n, _, _)| !tensors.contains_key(n)) {
            return Err(CheckpointError::MissingTensor(missing.clone()));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::save(path, &self.to_entries())
    }

    pub fn load(cfg: &ModelConfig, path: &Path) -> Result<Self> {
        let entries = container::load(path)?;
        Self::from_entries(cfg, &entries).map_err(|k| Error::checkpoint(path, k))
    }
}

/// Graph handles of a [`ParamStore`] registered in one graph.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(&v) => v,
            None => panic!("parameter {name:?} is not part of the model layout"),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}
