//! Adaptive sparse anchor generation on feature pyramids.

pub mod assign;
pub mod cli;
pub mod config;
pub mod error;
pub mod evalstats;
pub mod featpyr;
pub mod generator;
pub mod geometry;
pub mod losses;
pub mod predictor;
pub mod rng;
pub mod synthdata;
pub mod tensorfile;
pub mod training;

pub use error::{Error, Result};
