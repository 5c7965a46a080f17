//! Task-oriented feature encoding over noisy channels.

pub mod channel;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder_layers;
pub mod error;
pub mod evaluation;
pub mod ib_losses;
pub mod models;
pub mod nn;
pub mod real;
pub mod run;
pub mod training;

pub use error::{Error, Result};
