//! Prompt-based scoring of recommendation letters and the downstream
//! analysis: metadata evaluation, candidate aggregation, regressions and
//! random forests.

pub mod aggregate;
pub mod backend;
pub mod corpus;
pub mod error;
pub mod evalmeta;
pub mod forest;
pub mod lexical;
pub mod pipeline;
pub mod prompt;
pub mod stats;
pub mod synth;
pub mod table;

pub use error::{Error, Result};
