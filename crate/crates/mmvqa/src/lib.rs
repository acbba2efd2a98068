//! Training, evaluation, file formats, and dataset tooling around the
//! `mmvqa-core` numerics: TSV corpus/VQA ingestion, a synthetic
//! shapes-on-a-plane dataset generator, masked-language pretraining and
//! classification finetuning loops, versioned checkpoints, routed
//! evaluation with accuracy/BLEU reporting, and attention-heatmap export.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod synth;
pub mod train;

pub use error::AppError;
