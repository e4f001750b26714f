pub mod acoustic;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod infer;
pub mod lm;
pub mod nn;
pub mod pipeline;
pub mod numerics;
pub mod seed;
pub mod selftrain;
pub mod tokenizer;
pub mod translator;

pub use error::{Error, Result};
