//! Multi-modal sleep-stage classification: a CNN over the raw EEG epoch and
//! a Transformer over its spectrogram, aligned with a contrastive loss and
//! combined by a cross-masking sequence model over 21-epoch windows.

pub mod backbones;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod diffcore;
pub mod dsp;
pub mod error;
pub mod gradsuite;
pub mod model;
pub mod sequence;
pub mod training;

pub use error::{Error, Result};
