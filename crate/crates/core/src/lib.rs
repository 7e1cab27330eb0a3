pub mod adapters;
pub mod container;
pub mod config;
pub mod corpus;
pub mod distillation;
pub mod efficiency;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod gating;
pub mod numerics;
pub mod pipeline;
pub mod retrieval;

pub use error::{Error, Result};
