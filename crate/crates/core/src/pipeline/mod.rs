//! End-to-end harness: dataset ingestion, evidence attachment, reader
//! training and evaluation, configuration, and checkpointing.

mod config;
mod data;
mod reader;
mod synth;

pub use config::{ConfigMap, PipelineConfig};
pub use data::{
    attach_evidence_records, attach_generated_evidence, evidence_ids, generate_factual_records,
    generate_textual_records, load_dataset, load_evidence, parse_dataset, save_dataset,
    save_evidence, to_generator_sample, EvidenceRecord, EvidenceSource, EvidenceSources, Sample,
};
pub use reader::{
    evaluate, predict_samples, reader_vocabulary, train_reader, write_predictions, EvalReport,
    HeadKind, Prediction, ReaderConfig, ReaderModel, TrainOutcome,
};
pub use synth::{synth_task, EvidenceDependency, SynthSpec};

use crate::capsule::CapsuleError;
use crate::encoder::EncoderError;
use crate::factual::KgError;
use crate::numerics::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Capsule(#[from] CapsuleError),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error("dataset line {line}: {message}")]
    Dataset { line: usize, message: String },
    #[error("config: {0}")]
    Config(String),
    #[error("evidence file: {0}")]
    Evidence(String),
    #[error("dataset has unlabeled samples; accuracy is undefined (use predictions)")]
    Unlabeled,
    #[error("checkpoint directory is missing `{0}`")]
    MissingCheckpointFile(String),
    #[error("training aborted: {0}")]
    Training(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PipelineError>;
