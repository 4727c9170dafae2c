//! Speech-text alignment pre-training for spoken language understanding.
//!
//! A speech Transformer is pre-trained by masked frame reconstruction, then
//! pulled towards a text Transformer on transcribed audio, either through
//! the `[CLS]` outputs or token by token. The speech encoder alone is then
//! fine-tuned for utterance classification or answer-span prediction.

pub mod ablation;
pub mod alignment;
pub mod config;
pub mod downstream;
pub mod error;
pub mod features;
pub mod gradsuite;
pub mod manifest;
pub mod masking;
pub mod nn;
pub mod numerics;
pub mod speech;
pub mod synthdata;
pub mod text;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};
