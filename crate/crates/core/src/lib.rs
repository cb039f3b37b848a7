//! Contrast-and-correct verification for citation-grounded generation.
//!
//! A main model drafts an answer from retrieved passages, a verifier model
//! re-answers from only the cited passages, and the two are compared. Agreed
//! statements and their sources are carried into a correction round until the
//! answers agree or the iteration budget runs out.

pub mod answer;
pub mod consistency;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod lm;
pub mod pipeline;
pub mod retrieval;
pub mod sensitivity;
pub mod text;

pub use error::{Error, Result};
