pub mod adapter;
pub mod autodiff;
pub mod backbone;
pub mod baselines;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod forward;
pub mod gradcheck;
pub mod harness;
pub mod i2i;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod plot;
pub mod pretrain;
pub mod rng;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use autodiff::{AttnLayout, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
