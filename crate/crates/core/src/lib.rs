//! Conditioned music source separation with latent-source attentive
//! frequency transformations and gated point-wise convolutional modulation.

pub mod blocks;
pub mod conditioning;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod lasaft;
pub mod model;
pub mod numerics;
pub mod spectrogram;
pub mod training;

pub use error::{Error, Result};
