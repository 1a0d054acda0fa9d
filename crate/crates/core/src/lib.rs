pub mod autograd;
pub mod error;
pub mod graph;
pub mod harness;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod params;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
