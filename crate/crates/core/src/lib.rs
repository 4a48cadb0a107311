//! Multi-class image anomaly detection by dual-stream feature reconstruction
//! conditioned on class-prototype normality prompts.

pub mod archive;
pub mod backbone;
pub mod config;
pub mod datagen;
pub mod dataset;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod model;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod pool;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
