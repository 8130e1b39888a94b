//! Causal self-supervised pretrained (CSP) frontend for streaming speech separation.

pub mod archive;
pub mod config;
pub mod audio;
pub mod data_sim;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pretext;
pub mod quantizer;
pub mod separation;
pub mod trainer;

pub use error::{Error, Result};
