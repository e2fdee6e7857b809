// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod blocks;
pub mod cli;
pub mod config;
pub mod erf;
pub mod error;
pub mod io;
pub mod neuron;
pub mod oracle;
pub mod rng;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Shape5, Tensor5};
