//! Reliability laboratory for quantized DNN accelerators.
//!
//! - [`qtensor`]: fixed-point tensors, quantization math and bit flips
//! - [`netgraph`]: network description, file formats, reference inference
//! - [`systolic`]: weight-stationary systolic-array execution and cycle model
//! - [`guard`]: activation range extraction and range-check mitigation
//! - [`faultlab`]: fault sites, statistical sizing, fault campaigns
//! - [`report`]: outcome classification, metrics, design-space sweeps, emitters

pub mod error;
pub mod faultlab;
pub mod guard;
pub mod netgraph;
pub mod qtensor;
pub mod report;
pub mod systolic;

pub use error::{Error, Result};
