//! Minimal reverse-mode differentiation over dense `f64` tensors: a tape
//! ([`Graph`]), named parameters ([`ParamStore`]), the Adam optimizer, a
//! finite-difference gradient checker and a tensor archive format.

pub mod archive;
mod error;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod optim;
mod params;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport};
pub use graph::{BnUpdate, Gradients, Graph, Var, BN_EPS, BN_MOMENTUM};
pub use optim::{Adam, AdamConfig};
pub use params::{Buffer, BufferId, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

/// Activation applied after an affine map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Identity,
}

impl Graph {
    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        match kind {
            Activation::Relu => self.relu(x),
            Activation::Tanh => self.tanh(x),
            Activation::Sigmoid => self.sigmoid(x),
            Activation::Identity => x,
        }
    }
}
