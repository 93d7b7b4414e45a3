//! Desk-scale laboratory for non-autoregressive translation.
//!
//! Tiny autoregressive teachers and non-autoregressive students
//! (conditional masked LM with mask-predict decoding, and glancing
//! training) are trained on synthetic multimodal translation tasks, with
//! sequence-level distillation, symmetric and asymmetric architecture
//! scaling, quality and weakness metrics, and decoding-speed measurement.

pub mod compute;
pub mod data;
pub mod decoding;
mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod speedbench;
pub mod training;

pub use error::{Error, Result};
