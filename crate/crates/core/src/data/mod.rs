//! Manifests, image decoding, augmentation, batching and the synthetic corpus.

pub mod ava;
pub mod image;
pub mod manifest;
pub mod pipeline;
pub mod synth;

pub use self::image::{images_to_tensor, Image};
pub use manifest::{Manifest, ManifestRecord, NUM_STYLES};
pub use pipeline::{
    augment, collate, derive_rng, epoch_batches, epoch_permutation, make_batches, sample_comment, AugmentConfig, Batch,
    CollateOptions, CommentSampling, Dataset,
};
pub use synth::{generate_synthetic_corpus, synthesize, SynthSpec};
