pub mod cli;
pub mod ctc;
pub mod duration;
pub mod error;
pub mod evalkit;
pub mod normalizer;
pub mod pipeline;
pub mod s2ut;
pub mod seqmodel;
pub mod synthworld;
pub mod units;

pub use error::{Error, Result};
