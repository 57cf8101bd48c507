//! Focused prefix tuning on a from-scratch transformer: synthetic attributed
//! corpora, prefix training against a frozen base, logits-manipulation
//! decoding and the evaluation harness around them.

pub mod cli;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod prefix;

pub use error::{Error, Result};
