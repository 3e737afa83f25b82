//! Pretraining, adapter finetuning and evaluation drivers.

pub mod adapt;
pub mod eval;
pub mod optim;
pub mod pretrain;
pub mod runlog;

pub use adapt::{adapter_finetune, anchor_embedding, embed_dataset, margin_sweep, AdaptReport, FrozenFeatures};
pub use eval::{evaluate, parse_tasks, EvalInputs, Report, Task};
pub use optim::{clip_global_norm, linear_decay, AdamW};
pub use pretrain::{corpus_vocab, evaluate_batch, pretrain, pretrain_step, PretrainData, PretrainState, StepReport};
pub use runlog::{LogEntry, RunLog};
