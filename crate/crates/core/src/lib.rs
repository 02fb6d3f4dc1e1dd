pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod element_attention;
pub mod embeddings;
pub mod error;
pub mod eval;
pub mod model;
pub mod ranker;
pub mod sampling;
pub mod sentence_attention;
pub mod tensor;
pub mod time_sequence;
pub mod train;

pub use error::{Error, Result};
