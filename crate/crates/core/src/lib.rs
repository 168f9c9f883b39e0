//! Transferable prompt-based few-shot text classification.
//!
//! A shared masked-LM backbone is meta-trained across several tasks with
//! continuous prompts, then specialized to a seen task or generalized to an
//! unseen one.

pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod debias;
pub mod encoders;
pub mod error;
pub mod experiment;
pub mod mma;
pub mod model;
pub mod params;
pub mod templates;
pub mod tms;

pub use error::{Error, Result};
