//! Joint video retrieval and answer-span localization over a corpus of
//! subtitled videos, driven by a single global-span matrix per
//! (question, video) pair.

pub mod corpus;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod globalspan;
pub mod model;
pub mod numcore;
pub mod training;

pub use error::{Error, Result};
