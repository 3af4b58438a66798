//! Autoregressive adaptive hypergraph transformer for skeleton action
//! recognition, built on a small reverse-mode tensor library.

pub mod adaptive_decoder;
#[cfg(feature = "cli")]
pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod hypergraph;
pub mod losses;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod quantizer;

pub use error::{Error, Result};
