pub mod app;
pub mod distill;
pub mod dsp;
pub mod error;
pub mod finetune;
pub mod gridsearch;
pub mod model;
pub mod nn;
pub mod pretrain;
pub mod runtime;

pub use error::{Error, Result};
