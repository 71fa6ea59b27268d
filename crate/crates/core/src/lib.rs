//! Multi-modal, multi-task masked autoencoding for Earth-observation rasters.

pub mod cli;
pub mod datamodel;
pub mod decoders;
pub mod encoder;
pub mod error;
pub mod masking;
pub mod model;
pub mod nn;
pub mod objective;
pub mod plot;
pub mod rng;
pub mod tokenizer;
pub mod training;
pub mod transfer;

pub use error::{Error, Result};
