//! Desk-scale testbed for backdoor attacks on unpaired image-text
//! contrastive models: synthetic data, toy encoders, semantic-matrix
//! poisoning, embedding-separation fine-tuning, triggers, zero-shot
//! evaluation and lightweight defenses.

pub mod attack;
pub mod data;
pub mod defense;
pub mod error;
pub mod eval;
pub mod fft;
pub mod model;
pub mod ops;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod triggers;

pub use error::{CoreError, Result};
pub use tensor::Tensor;
