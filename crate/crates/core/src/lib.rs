//! Contrastive transfer training of multi-scale graph convolutional
//! networks for rumor detection in low-resource domains and languages.

#![allow(clippy::needless_range_loop)]

pub mod augment;
pub mod commands;
pub mod config;
pub mod dataio;
pub mod embed;
pub mod error;
pub mod evalkit;
pub mod model;
pub mod numcore;
pub mod objectives;
pub mod propagation;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
