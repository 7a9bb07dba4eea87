//! Interpretable causal spatio-temporal traffic speed forecasting.

pub mod cgg;
pub mod dataio;
pub mod embeddings;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod roadnet;
pub mod sfpr;
pub mod stcl;
pub mod trainer;

pub use error::{IcstError, Result};
