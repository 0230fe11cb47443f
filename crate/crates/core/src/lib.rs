//! Pseudo-to-Real two-stage transformer pretraining with granular offloading.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod controller;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod offload;
pub mod optim;
pub mod run;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
