//! Configuration, data ingestion, telemetry and benchmarks around
//! `groupclip-core`, driven by the `groupclip` command-line tool.

// `!(x > 0.0)` is used on purpose: it rejects NaN along with the bad range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod calibrate;
pub mod cli;
pub mod compare;
pub mod config;
pub mod data;
pub mod error;
pub mod pipeline_sim;
pub mod presets;
pub mod run;
pub mod telemetry;

pub use config::RunConfig;
pub use error::{HarnessError, Result};
