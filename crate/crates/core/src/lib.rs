#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Simulation of grid-forming converters under angular droop control.

pub mod control;
pub mod error;
pub mod frames;
pub mod plant;
pub mod powerflow;
pub mod analysis;
pub mod sim;
pub mod presets;
pub mod config;
pub mod export;
pub mod checks;
