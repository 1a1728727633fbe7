#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod autodiff;
pub mod bpe;
pub mod config;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod sim;
pub mod tensor;
pub mod tokenize;
pub mod vocab;

pub use error::{Error, Result};
pub use tensor::{ParameterSet, Real, Tensor};
