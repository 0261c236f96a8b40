pub mod dataset;
pub mod error;
pub mod estimator;
pub mod features;
pub mod geometry;
pub mod nn;
pub mod phonatory;
pub mod reconstruction;
pub mod rng;
pub mod shapespace;
pub mod stats;
pub mod synthdata;

pub use error::{Error, Result};
