#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod attention;
pub mod autograd;
pub mod brains;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod graphworld;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod policy;
pub mod registry;
pub mod sgca;
pub mod tensor;
pub mod training;
pub mod variants;

pub use error::{Error, Result};
