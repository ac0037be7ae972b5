//! Quadruple-stream visible/infrared person re-identification at desk scale.
//!
//! The crate contains everything needed to train and evaluate the network:
//! a small reverse-mode tensor engine ([`tensor`]), a synthetic paired
//! visible/infrared dataset ([`data`]), four-stream augmentation
//! ([`augment`]), identity-balanced sampling ([`sampler`]), the model
//! ([`model`]), the quadruple center triplet loss ([`loss`]), retrieval
//! metrics ([`metrics`]), and the training / evaluation drivers used by the
//! `mscm` command line tool.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradsuite;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod protocol;
pub mod sampler;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
