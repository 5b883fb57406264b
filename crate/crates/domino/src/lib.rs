//! Compiler and cycle-level simulator for a mesh of compute-in-memory tiles.
//!
//! The pipeline is: [`nn_model`] describes a quantized network, [`mapper`]
//! assigns weights to tiles, [`isa`] emits per-router schedule tables,
//! [`sim`] executes them step by step, [`metrics`] turns event counts into
//! energy and throughput. [`oracle`] is the integer reference used to check
//! every simulated result.

pub mod isa;
pub mod mapper;
pub mod metrics;
pub mod nn_model;
pub mod oracle;
pub mod sim;
