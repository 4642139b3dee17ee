//! Tensors, reverse-mode differentiation, seeded randomness and Adam.

mod adam;
mod gradcheck;
mod graph;
mod params;
mod rng;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamSlot, AdamState};
pub use gradcheck::{grad_check, grad_check_sampled, grad_check_where, DENOM_FLOOR, SAMPLE_THRESHOLD};
pub use graph::{Activation, Graph, Trainable, Var};
pub use params::{Group, ParamId, ParamStore, Parameter, Phase};
pub use rng::Rng;
pub use tensor::{matmul, Tensor};
