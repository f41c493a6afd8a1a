//! Desk-scale 3D robotic representation learning on top of a 2D transformer.

pub mod ablation;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod envdata;
pub mod error;
pub mod exec;
pub mod geometry;
pub mod masking;
pub mod nn;
pub mod optim;
pub mod pe_lifting;
pub mod policy;
pub mod pretrain;
pub mod tokenizer3d;
pub mod train;

pub use error::{Error, Result};
pub use exec::Execution;
