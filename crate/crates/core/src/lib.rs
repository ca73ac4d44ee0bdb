pub mod dit;
pub mod error;
pub mod flow;
pub mod geometry;
pub mod harness;
pub mod image;
pub mod metrics;
pub mod numerics;
pub mod synth;
pub mod tokens;

pub use error::{Error, Result};
