use aesvl_autograd::{Real, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::{images_to_tensor, Image};
use super::manifest::{Manifest, ManifestRecord};
use crate::error::{Error, Result};
use crate::model::TokenBatch;
use crate::tokenizer::{Mode, Vocabulary, PAD};

pub const STREAM_SHUFFLE: u64 = 1;
pub const STREAM_COMMENT: u64 = 2;
pub const STREAM_AUGMENT: u64 = 3;
pub const STREAM_SYNTH: u64 = 4;
pub const STREAM_SPLIT: u64 = 5;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for the stream identified by `parts` under `seed`.
pub fn derive_rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for &p in parts {
        h = splitmix(h ^ splitmix(p));
    }
    ChaCha8Rng::seed_from_u64(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommentSampling {
    /// Uniform choice per visit.
    Random,
    /// Always the first comment.
    Fixed,
}

pub fn sample_comment<'a, R: Rng>(r: &'a ManifestRecord, rng: &mut R, mode: CommentSampling) -> Result<&'a str> {
    if r.comments.is_empty() {
        return Err(Error::Record {
            id: r.id.clone(),
            msg: "no comments to sample".into(),
        });
    }
    let i = match mode {
        CommentSampling::Fixed => 0,
        CommentSampling::Random => rng.random_range(0..r.comments.len()),
    };
    Ok(&r.comments[i])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub source_size: usize,
    pub crop_size: usize,
    pub horizontal_flip: bool,
    pub enabled: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            source_size: 40,
            crop_size: 32,
            horizontal_flip: true,
            enabled: true,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 || self.crop_size > self.source_size {
            return Err(Error::Config(format!(
                "crop_size {} must be in 1..={}",
                self.crop_size, self.source_size
            )));
        }
        Ok(())
    }
}

/// Random crop (then a coin-flip mirror when enabled); the center crop when
/// augmentation is disabled.
pub fn augment<R: Rng>(img: &Image, cfg: &AugmentConfig, rng: &mut R) -> Result<Image> {
    cfg.validate()?;
    if img.width != cfg.source_size || img.height != cfg.source_size {
        return Err(Error::Invalid(format!(
            "image is {}x{}, augmentation expects {}x{}",
            img.width, img.height, cfg.source_size, cfg.source_size
        )));
    }
    let slack = cfg.source_size - cfg.crop_size;
    if !cfg.enabled {
        return Ok(img.crop(slack / 2, slack / 2, cfg.crop_size, false));
    }
    let y0 = rng.random_range(0..=slack);
    let x0 = rng.random_range(0..=slack);
    let flip = cfg.horizontal_flip && rng.random_bool(0.5);
    Ok(img.crop(y0, x0, cfg.crop_size, flip))
}

/// Seeded permutation of `0..n` for one epoch.
pub fn epoch_permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut derive_rng(seed, &[STREAM_SHUFFLE, epoch]));
    idx
}

/// Index batches of one epoch; the last one may be partial.
pub fn make_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch size must be positive");
    epoch_permutation(n, seed, epoch)
        .chunks(batch_size)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Records with decoded images held in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<ManifestRecord>,
    pub images: Vec<Image>,
}

impl Dataset {
    pub fn load(manifest: &Manifest, channels: usize) -> Result<Self> {
        let images = manifest
            .records
            .iter()
            .map(|r| Image::load(&manifest.image_path(r), channels))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            records: manifest.records.clone(),
            images,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            records: idx.iter().map(|&i| self.records[i].clone()).collect(),
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
        }
    }

    /// Center crops (augmentation off) of the given records as `[N, H, W, C]`.
    pub fn eval_images<T: Real>(&self, idx: &[usize], aug: &AugmentConfig) -> Result<Tensor<T>> {
        let off = AugmentConfig { enabled: false, ..*aug };
        let mut rng = derive_rng(0, &[]);
        let crops = idx
            .iter()
            .map(|&i| augment(&self.images[i], &off, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        images_to_tensor(&crops)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T: Real> {
    pub indices: Vec<usize>,
    pub images: Tensor<T>,
    /// `w1 .. wn <cls>` per record.
    pub contrastive: TokenBatch,
    /// `<bos> w1 .. wn` per record.
    pub gen_inputs: TokenBatch,
    /// `w1 .. wn <eos>` per record, `<pad>`-aligned with `gen_inputs`.
    pub gen_targets: Vec<usize>,
    pub comments: Vec<String>,
    pub mos: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy)]
pub struct CollateOptions<'a> {
    pub vocab: &'a Vocabulary,
    pub max_text_length: usize,
    pub augment: &'a AugmentConfig,
    pub sampling: CommentSampling,
    pub seed: u64,
}

/// Builds batch `batch_index` of `epoch`. Comment draws and crops use
/// per-position streams keyed by (epoch, batch_index, position), so any
/// batch can be rebuilt without replaying earlier ones.
pub fn collate<T: Real>(
    ds: &Dataset,
    indices: &[usize],
    epoch: u64,
    batch_index: u64,
    opt: &CollateOptions,
) -> Result<Batch<T>> {
    let mut crops = Vec::with_capacity(indices.len());
    let mut comments = Vec::with_capacity(indices.len());
    for (pos, &i) in indices.iter().enumerate() {
        let key = [epoch, batch_index, pos as u64];
        let mut crng = derive_rng(opt.seed, &[STREAM_COMMENT, key[0], key[1], key[2]]);
        comments.push(sample_comment(&ds.records[i], &mut crng, opt.sampling)?.to_string());
        let mut arng = derive_rng(opt.seed, &[STREAM_AUGMENT, key[0], key[1], key[2]]);
        crops.push(augment(&ds.images[i], opt.augment, &mut arng)?);
    }
    let contrastive: Vec<Vec<usize>> = comments
        .iter()
        .map(|c| opt.vocab.encode(c, Mode::Contrastive, opt.max_text_length))
        .collect();
    let generative: Vec<Vec<usize>> = comments
        .iter()
        .map(|c| opt.vocab.encode(c, Mode::Generative, opt.max_text_length))
        .collect();
    let inputs: Vec<Vec<usize>> = generative.iter().map(|s| s[..s.len() - 1].to_vec()).collect();
    let gen_inputs = TokenBatch::from_sequences(&inputs)?;
    let mut gen_targets = Vec::with_capacity(gen_inputs.ids.len());
    for s in &generative {
        gen_targets.extend_from_slice(&s[1..]);
        gen_targets.resize(gen_targets.len() + gen_inputs.len - (s.len() - 1), PAD);
    }
    let mos = indices.iter().map(|&i| ds.records[i].mos).collect::<Option<Vec<f64>>>();
    Ok(Batch {
        indices: indices.to_vec(),
        images: images_to_tensor(&crops)?,
        contrastive: TokenBatch::from_sequences(&contrastive)?,
        gen_inputs,
        gen_targets,
        comments,
        mos,
    })
}

/// Batches of one epoch in delivery order.
pub fn epoch_batches<'a, T: Real>(
    ds: &'a Dataset,
    batch_size: usize,
    epoch: u64,
    opt: &'a CollateOptions<'a>,
) -> impl Iterator<Item = Result<Batch<T>>> + 'a {
    make_batches(ds.len(), batch_size, opt.seed, epoch)
        .into_iter()
        .enumerate()
        .map(move |(b, idx)| collate(ds, &idx, epoch, b as u64, opt))
}
