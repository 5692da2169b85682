pub mod checkpoint;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod generator;
pub mod harness;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod preference;
pub mod ranker;
pub mod reflection;
pub mod retrieval;

pub use error::{Error, Result};
