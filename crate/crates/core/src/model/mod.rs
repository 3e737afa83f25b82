//! Patch image encoder, attentional poolers and the two text decoders.
//!
//! Parameter names follow `layout`. Contrastive embeddings are taken after
//! the poolers/projection and then L2-normalized; the unnormalized image
//! embedding is what the rank adapter consumes.

mod config;
mod net;
mod params;

pub use config::ModelConfig;
pub use net::{generate_caption, image_embeddings, patchify, text_embeddings, Net, TokenBatch};
pub use params::{layout, truncated_normal, Bound, Init, ParamStore, INIT_STD, INIT_TAU, LOG_TAU, OPTIM_PREFIX};
