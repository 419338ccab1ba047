//! Differentiable kernels: tensors, the autodiff tape, LSTM and attention
//! layers, AdamW and finite-difference checking.

pub mod adamw;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod tensor;

pub use adamw::{AdamW, AdamWConfig, Moments};
pub use graph::{Gradients, Graph, Var};
pub use layers::{
    attention_weights, lstm_forward, mha_forward, mse_loss, LstmParams, MhaParams, NamedParams,
};
pub use tensor::{Scalar, Tensor};
