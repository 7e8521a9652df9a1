//! Model assembly, the reconstruction-loss training loop, checkpoints and inference.
//!
//! Dataflow per sentence: characters → semantic encoder → per-character attention
//! over gloss keys → sampled pronunciation mixture `p'` plus retrieved semantics `s'`
//! → linguistic encoder → linear decoder to acoustic features. The loss compares the
//! decoder output with target features only.

mod checkpoint;
mod config;
mod data;
mod infer;
mod lexicon;
mod model;
mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::ModelConfig;
pub use data::{Corpus, Labels, Split, TrainingBatch, Utterance};
pub use infer::{infer_pronunciations, Inference};
pub use lexicon::{CharPlan, Lexicon};
pub use model::{CharDiagnostics, ForwardOptions, ForwardOutput, Model, Noise};
pub use train::{epoch_order, polyphone_accuracy, MetricRecord, RunOptions, RunSummary, Trainer, DIVERGENCE_LIMIT};

use std::path::PathBuf;

use thiserror::Error;

use crate::binio::BinError;
use crate::dictionary::DictError;
use crate::encoders::EncoderError;
use crate::numerics::TensorError;
use crate::s2pa::S2paError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("config line {line}: {reason}")]
    ConfigLine { line: usize, reason: String },
    #[error("imported key mode needs a key file")]
    MissingKeys,
    #[error("empty sentence")]
    EmptySentence,
    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("{0}")]
    Data(String),
    #[error("training diverged at step {step} (loss {loss}){}", checkpoint.as_ref().map(|p| format!("; last good state saved to {}", p.display())).unwrap_or_default())]
    Diverged {
        step: u64,
        loss: f64,
        checkpoint: Option<PathBuf>,
    },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    S2pa(#[from] S2paError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dictionary(#[from] DictError),
    #[error("corrupt checkpoint: {0}")]
    Bin(#[from] BinError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
