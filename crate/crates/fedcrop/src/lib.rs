pub mod aggregation;
pub mod checkpoint;
pub mod data;
pub mod detector;
pub mod error;
pub mod model;
pub mod nn;
pub mod orchestrator;
pub mod plots;
pub mod recovery;
pub mod rng;
pub mod summary;

pub use error::{Error, Result};
