//! Command-line surface. Exit codes: 0 success, 1 usage error, 2 runtime
//! failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::Config;
use crate::container::write_atomic;
use crate::data::{generate_synthetic_corpus, Dataset, Manifest};
use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::objectives::AdapterState;
use crate::prompts::PromptBank;
use crate::tokenizer::Vocabulary;
use crate::train::{
    adapter_finetune, anchor_embedding, corpus_vocab, embed_dataset, evaluate, parse_tasks, pretrain, EvalInputs,
    PretrainData, PretrainState, RunLog, Task,
};
use crate::zsl::{file_sha256, PromptCache};

pub const MODEL_FILE: &str = "model.ckpt";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const CONFIG_FILE: &str = "config.toml";
pub const RUNLOG_FILE: &str = "runlog.jsonl";
pub const ADAPTER_FILE: &str = "adapter.ckpt";
pub const REPORT_FILE: &str = "report.json";

#[derive(Parser, Debug)]
#[command(
    name = "aesvl",
    version,
    about = "Aesthetic vision-language pretraining, adapter finetuning and evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic corpus (images plus manifest.jsonl) into --out.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain from scratch, or resume from --checkpoint; writes a model directory.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Model directory or checkpoint to resume from.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the rank adapter on a frozen model; writes an adapter directory.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Zero-shot aesthetic and style scoring.
    Zsl {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated subset of zsl-iaa,zsl-style.
        #[arg(long, default_value = "zsl-iaa,zsl-style")]
        task: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Greedy captions for every image of a manifest.
    Caption {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate any of iaa, zsl-iaa, zsl-style, caption.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        adapter: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Embed the anchor and every prompt of the bank into a cache file.
    ExportPrompts {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `argv` and runs it; returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

/// A model directory (or a checkpoint file inside one).
#[derive(Debug, Clone)]
pub struct ModelDir {
    pub checkpoint: PathBuf,
    pub dir: PathBuf,
}

impl ModelDir {
    pub fn resolve(path: &Path) -> Self {
        if path.is_dir() {
            Self {
                checkpoint: path.join(MODEL_FILE),
                dir: path.to_path_buf(),
            }
        } else {
            Self {
                checkpoint: path.to_path_buf(),
                dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            }
        }
    }

    pub fn vocab(&self) -> Result<Vocabulary> {
        Vocabulary::load(&self.dir.join(VOCAB_FILE))
    }

    /// `--config` when given, else the directory's saved config, else defaults.
    pub fn config(&self, common: &Common) -> Result<Config> {
        let saved = self.dir.join(CONFIG_FILE);
        let mut cfg = match &common.config {
            Some(p) => Config::load(p)?,
            None if saved.exists() => Config::load(&saved)?,
            None => Config::default(),
        };
        if let Some(s) = common.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

fn load_config(common: &Common) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// A manifest file, or a directory holding `manifest.jsonl`.
pub fn resolve_manifest(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(crate::data::synth::MANIFEST_NAME)
    } else {
        path.to_path_buf()
    }
}

fn load_dataset(path: &Path, cfg: &Config) -> Result<Dataset> {
    let m = Manifest::load(&resolve_manifest(path))?;
    Dataset::load(&m, cfg.model.channels)
}

fn prompt_bank(cfg: &Config) -> Result<PromptBank> {
    match &cfg.eval.prompts {
        Some(p) => PromptBank::load(p),
        None => Ok(PromptBank::default()),
    }
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { common, out } => {
            let cfg = load_config(&common)?;
            let bank = prompt_bank(&cfg)?;
            let m = generate_synthetic_corpus(&cfg.synth, cfg.seed, &bank, &out)?;
            log::info!("wrote {} records to {}", cfg.synth.count, m.display());
            Ok(())
        }
        Command::Pretrain {
            common,
            manifest,
            out,
            checkpoint,
        } => {
            let resume = checkpoint.as_deref().map(ModelDir::resolve);
            let cfg = match &resume {
                Some(r) => r.config(&common)?,
                None => load_config(&common)?,
            };
            let ds = load_dataset(&manifest, &cfg)?;
            let mut state = match &resume {
                Some(r) => PretrainState::<f32>::load(&cfg.model, &r.checkpoint)?,
                None => PretrainState::fresh(&cfg.model, cfg.seed)?,
            };
            let vocab = match &resume {
                Some(r) => r.vocab()?,
                None => corpus_vocab(&ds.records, &prompt_bank(&cfg)?, cfg.model.vocab_size)?,
            };
            let mut log = RunLog::new();
            if let Some(r) = &resume {
                // carry the earlier part of the log over when it exists
                if let Ok(text) = std::fs::read_to_string(r.dir.join(RUNLOG_FILE)) {
                    for e in RunLog::parse(&text)? {
                        if e.step() <= state.step() {
                            log.push(e)?;
                        }
                    }
                }
            }
            create_dir(&out)?;
            write_atomic(&out.join(CONFIG_FILE), cfg.to_toml().as_bytes())?;
            write_atomic(&out.join(VOCAB_FILE), vocab.to_text().as_bytes())?;
            let data = PretrainData {
                ds: &ds,
                vocab: &vocab,
                eval: None,
            };
            let result = pretrain(
                &cfg,
                &data,
                &mut state,
                cfg.pretrain.steps,
                &mut log,
                Some(&out.join(MODEL_FILE)),
            );
            write_atomic(&out.join(RUNLOG_FILE), log.to_jsonl().as_bytes())?;
            result
        }
        Command::Adapt {
            common,
            checkpoint,
            manifest,
            out,
        } => {
            let md = ModelDir::resolve(&checkpoint);
            let cfg = md.config(&common)?;
            let params = ParamStore::<f32>::load(&cfg.model, &md.checkpoint)?;
            let vocab = md.vocab()?;
            let ds = load_dataset(&manifest, &cfg)?;
            let m = Manifest {
                dir: PathBuf::new(),
                records: ds.records.clone(),
            };
            let mos = m.require_mos("adapt")?;
            let feats = embed_dataset(&cfg.model, &params, &ds, &cfg.augment)?;
            let anchor = anchor_embedding(&cfg.model, &params, &vocab)?;
            let a = &cfg.adapt;
            let mut state = AdapterState::new(anchor, a.margin, a.residual, a.text_anchor)?;
            let mut log = RunLog::new();
            let rep = adapter_finetune(a, cfg.seed, &mut state, &feats.v, &mos, params.total_params(), &mut log)?;
            create_dir(&out)?;
            state.save(&out.join(ADAPTER_FILE))?;
            write_atomic(&out.join(RUNLOG_FILE), log.to_jsonl().as_bytes())?;
            let summary = serde_json::json!({
                "tunable_params": rep.tunable,
                "total_params": rep.total,
                "tunable_fraction": rep.fraction,
                "skipped_batches": rep.skipped_batches,
                "train_srcc": rep.final_train_srcc,
            });
            let text = serde_json::to_string_pretty(&summary).expect("json") + "\n";
            write_atomic(&out.join(REPORT_FILE), text.as_bytes())?;
            log::info!(
                "tunable parameters: {} of {} ({:.4}%)",
                rep.tunable,
                rep.total,
                100.0 * rep.fraction
            );
            Ok(())
        }
        Command::Zsl {
            common,
            checkpoint,
            manifest,
            task,
            out,
        } => {
            let tasks = parse_tasks(&task)?;
            if let Some(t) = tasks.iter().find(|t| !matches!(t, Task::ZslIaa | Task::ZslStyle)) {
                return Err(Error::Invalid(format!(
                    "zsl runs zsl-iaa and zsl-style only, not {}",
                    t.name()
                )));
            }
            run_eval(&common, &checkpoint, None, &manifest, &tasks, out.as_deref())
        }
        Command::Caption {
            common,
            checkpoint,
            manifest,
            out,
        } => {
            let md = ModelDir::resolve(&checkpoint);
            let cfg = md.config(&common)?;
            let params = ParamStore::<f32>::load(&cfg.model, &md.checkpoint)?;
            let vocab = md.vocab()?;
            let ds = load_dataset(&manifest, &cfg)?;
            let mut caps = std::collections::BTreeMap::new();
            for (i, r) in ds.records.iter().enumerate() {
                let image = ds.eval_images::<f32>(&[i], &cfg.augment)?;
                let ids =
                    crate::model::generate_caption(&cfg.model, &params, &image, cfg.eval.caption_max_len, vocab.len())?;
                caps.insert(r.id.clone(), vocab.decode(&ids)?);
            }
            emit(
                out.as_deref(),
                &(serde_json::to_string_pretty(&caps).expect("json") + "\n"),
            )
        }
        Command::Eval {
            common,
            checkpoint,
            adapter,
            manifest,
            task,
            out,
        } => {
            let tasks = parse_tasks(&task)?;
            run_eval(
                &common,
                &checkpoint,
                adapter.as_deref(),
                &manifest,
                &tasks,
                out.as_deref(),
            )
        }
        Command::ExportPrompts {
            common,
            checkpoint,
            out,
        } => {
            let md = ModelDir::resolve(&checkpoint);
            let cfg = md.config(&common)?;
            let cache = prompt_cache(&cfg, &md)?;
            cache.save(&out)
        }
    }
}

fn prompt_cache(cfg: &Config, md: &ModelDir) -> Result<PromptCache<f32>> {
    let params = ParamStore::<f32>::load(&cfg.model, &md.checkpoint)?;
    let vocab = md.vocab()?;
    let sha = file_sha256(&md.checkpoint)?;
    PromptCache::compute(&cfg.model, &params, &vocab, &prompt_bank(cfg)?, sha)
}

fn run_eval(
    common: &Common,
    checkpoint: &Path,
    adapter: Option<&Path>,
    manifest: &Path,
    tasks: &[Task],
    out: Option<&Path>,
) -> Result<()> {
    let md = ModelDir::resolve(checkpoint);
    let cfg = md.config(common)?;
    let params = ParamStore::<f32>::load(&cfg.model, &md.checkpoint)?;
    let vocab = md.vocab()?;
    let bank = prompt_bank(&cfg)?;
    let prompts = prompt_cache(&cfg, &md)?;
    let adapter = match adapter {
        Some(p) => {
            let file = if p.is_dir() {
                p.join(ADAPTER_FILE)
            } else {
                p.to_path_buf()
            };
            Some(AdapterState::<f32>::load(&file)?)
        }
        None => None,
    };
    let ds = load_dataset(manifest, &cfg)?;
    let inputs = EvalInputs {
        params: &params,
        vocab: &vocab,
        bank: &bank,
        prompts: &prompts,
        adapter: adapter.as_ref(),
    };
    let report = evaluate(&cfg, &inputs, &ds, tasks)?;
    emit(out, &report.to_json())
}
