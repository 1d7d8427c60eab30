pub mod backbone;
pub mod data;
pub mod error;
pub mod config;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod model;
pub mod semantic_fusion;
pub mod temporal_attention;
pub mod training;
pub mod tensor;

pub use error::{Error, Result};
