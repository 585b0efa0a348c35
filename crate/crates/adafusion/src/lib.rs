//! File formats, batched inference benchmarks and the `adafusion` command
//! line on top of `adafusion-core`.

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod export;
pub mod manifest;
pub mod pft;
pub mod throughput;

pub use adafusion_core as core;
pub use error::{Error, Result};
