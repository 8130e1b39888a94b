//! Evaluation and profiling: signal metrics, MAC counts, streaming
//! inference and the mutual-information bound checker.

pub mod macs;
pub mod metrics;
pub mod mi;
pub mod streaming;
