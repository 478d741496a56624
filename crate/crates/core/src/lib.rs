pub mod audio;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod encoder;
mod error;
pub mod features;
pub mod fusion;
pub mod gat;
pub mod metrics;
pub mod model;
pub mod training;
pub mod nn;
pub mod synth;

pub use error::{Error, Result};
