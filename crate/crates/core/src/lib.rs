//! Core algorithms for multimodal masked-language-model pretraining and
//! visual question answering over image+caption data: a dense-tensor
//! reverse-mode autodiff engine, a WordPiece-style tokenizer with
//! keyword-aware masking, a small multi-scale convolutional image encoder,
//! a transformer encoder with segment/position fusion, Adam and
//! plateau scheduling, answer metrics (accuracy, BLEU), and attention
//! heatmap extraction.
//!
//! This crate is `no_std` (with `alloc`) and performs no I/O; file formats,
//! training loops, and the CLI live in the companion `mmvqa` crate. All
//! computations use fixed summation orders so results are bit-for-bit
//! reproducible for a given seed.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod interp;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod tape;
pub mod tensor;
pub mod tokenizer;
pub mod vision;

pub use tape::{grad_check, Tape, Var};
pub use tensor::{NumericsError, Scalar, Tensor};
