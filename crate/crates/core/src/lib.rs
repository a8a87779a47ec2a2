//! Video captioning with object-aware aggregation over bidirectional
//! temporal graphs.

pub mod aggregation;
pub mod btg;
pub mod cli;
pub mod dataio;
pub mod decoder;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
