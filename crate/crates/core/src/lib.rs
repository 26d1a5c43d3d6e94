pub mod client;
pub mod config;
pub mod datagen;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod noise_model;
pub mod protocol;
pub mod rng;
pub mod runner;

pub use error::{Error, Result};
